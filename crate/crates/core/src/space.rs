//! Composite search spaces: per-module choice domains, dependent choices,
//! exact counting, canonical enumeration, uniform sampling and neighbourhoods.
//!
//! A space is loaded from a JSON document. Choices inside a module may carry a
//! single `at_most` dependency on a sibling ordinal choice (the MiniGrid image
//! encoder's `pooling_layer <= depth`). Choices linked by dependencies form a
//! *group*; groups are independent of each other, which is what makes exact
//! counting and jointly-uniform sampling cheap.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TRAFFIC_DOC: &str = include_str!("../spaces/traffic.json");
const MINIGRID_DOC: &str = include_str!("../spaces/minigrid.json");
const MANISKILL_DOC: &str = include_str!("../spaces/maniskill.json");

/// Ids of the space documents shipped with the crate.
pub const BUILTIN_SPACES: [&str; 3] = ["traffic", "minigrid", "maniskill"];

/// Approximate architecture counts quoted for the tabulated benchmarks. The
/// exact counts from [`CompositeSpace::cardinality`] differ; see the README.
pub const QUOTED_TRAFFIC_COUNT: u128 = 26_000_000;
pub const QUOTED_MINIGRID_COUNT: u128 = 19_000_000;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("malformed space document: {0}")]
    Malformed(String),
    #[error("duplicate module name `{0}`")]
    DuplicateModule(String),
    #[error("duplicate choice `{0}`")]
    DuplicateChoice(String),
    #[error("empty domain for `{0}`")]
    EmptyDomain(String),
    #[error("duplicate value `{value}` in domain of `{path}`")]
    DuplicateValue { path: String, value: String },
    #[error("ordinal domain of `{0}` must hold strictly increasing numbers")]
    NotIncreasing(String),
    #[error("categorical domain of `{0}` must hold labels")]
    NotLabels(String),
    #[error("dangling dependency: `{path}` references `{target}`")]
    DanglingDependency { path: String, target: String },
    #[error("default `{value}` for `{path}` is not in its domain")]
    BadDefault { path: String, value: String },
    #[error("space `{0}` declares no expert defaults")]
    NoDefaults(String),
    #[error("unknown built-in space `{0}`")]
    UnknownSpace(String),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("space `{0}` has no valid design vectors")]
    EmptySpace(String),
    #[error("invalid design vector: {0}")]
    InvalidVector(String),
}

/// A single admissible value: a number for ordinal choices, a label for
/// categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Label(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Label(_) => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            Value::Label(s) => Some(s),
            Value::Number(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::Label(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Label(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceKind {
    /// Ordered numeric values; local moves go to adjacent values only.
    Ordinal,
    /// Unordered labels.
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDomain {
    pub kind: ChoiceKind,
    pub values: Vec<Value>,
}

impl ChoiceDomain {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Exact membership lookup; no snapping to the nearest value.
    pub fn index_of(&self, value: &Value) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// `this <= sibling`, the only dependency rule the space language has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub at_most: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSpec {
    pub name: String,
    pub kind: ChoiceKind,
    pub values: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency: Option<Dependency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ChoiceSpec {
    pub fn domain(&self) -> ChoiceDomain {
        ChoiceDomain {
            kind: self.kind,
            values: self.values.clone(),
        }
    }

    pub fn index_of(&self, value: &Value) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpace {
    pub name: String,
    pub family: String,
    pub choices: Vec<ChoiceSpec>,
}

impl ModuleSpace {
    pub fn choice(&self, name: &str) -> Option<&ChoiceSpec> {
        self.choices.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceDocument {
    space_id: String,
    #[serde(default = "default_metric")]
    task_metric: String,
    modules: Vec<ModuleSpace>,
}

fn default_metric() -> String {
    "task metric".to_string()
}

/// Dependency-connected choices, with every valid joint index combination.
#[derive(Debug, Clone)]
struct Group {
    members: Vec<usize>,
    valid: Vec<Vec<usize>>,
}

/// Flat position of one choice in canonical order.
#[derive(Debug, Clone)]
struct Slot {
    module: usize,
    choice: usize,
    /// Flat index of the `at_most` target, if any.
    bound: Option<usize>,
}

/// The full search space: an ordered list of module spaces.
///
/// Immutable after construction. Design vectors can be handled either as
/// [`DesignVector`] maps or as flat index vectors in canonical order
/// (modules in declared order, choices in declared order).
#[derive(Debug, Clone)]
pub struct CompositeSpace {
    space_id: String,
    task_metric: String,
    modules: Vec<ModuleSpace>,
    slots: Vec<Slot>,
    groups: Vec<Group>,
}

impl PartialEq for CompositeSpace {
    fn eq(&self, other: &Self) -> bool {
        self.space_id == other.space_id
            && self.task_metric == other.task_metric
            && self.modules == other.modules
    }
}

impl Serialize for CompositeSpace {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SpaceDocument {
            space_id: self.space_id.clone(),
            task_metric: self.task_metric.clone(),
            modules: self.modules.clone(),
        }
        .serialize(serializer)
    }
}

/// Parses and validates a space document.
pub fn load_space(document: &str) -> Result<CompositeSpace, SpaceError> {
    let doc: SpaceDocument =
        serde_json::from_str(document).map_err(|e| SpaceError::Malformed(e.to_string()))?;
    CompositeSpace::new(doc.space_id, doc.task_metric, doc.modules)
}

/// Loads one of the documents shipped in `spaces/`.
pub fn builtin_space(id: &str) -> Result<CompositeSpace, SpaceError> {
    let doc = match id {
        "traffic" => TRAFFIC_DOC,
        "minigrid" => MINIGRID_DOC,
        "maniskill" => MANISKILL_DOC,
        other => return Err(SpaceError::UnknownSpace(other.to_string())),
    };
    load_space(doc)
}

impl CompositeSpace {
    pub fn new(
        space_id: impl Into<String>,
        task_metric: impl Into<String>,
        modules: Vec<ModuleSpace>,
    ) -> Result<Self, SpaceError> {
        let space_id = space_id.into();
        let mut seen_modules = HashSet::new();
        let mut slots = Vec::new();
        for (mi, module) in modules.iter().enumerate() {
            if !seen_modules.insert(module.name.as_str()) {
                return Err(SpaceError::DuplicateModule(module.name.clone()));
            }
            let mut seen_choices = HashSet::new();
            for choice in &module.choices {
                let path = format!("{}.{}", module.name, choice.name);
                if !seen_choices.insert(choice.name.as_str()) {
                    return Err(SpaceError::DuplicateChoice(path));
                }
                check_domain(&path, choice)?;
            }
            let base = slots.len();
            for (ci, choice) in module.choices.iter().enumerate() {
                let path = format!("{}.{}", module.name, choice.name);
                let bound = match &choice.dependency {
                    None => None,
                    Some(dep) => {
                        let target = module
                            .choices
                            .iter()
                            .position(|c| c.name == dep.at_most)
                            .filter(|&t| t != ci)
                            .ok_or_else(|| SpaceError::DanglingDependency {
                                path: path.clone(),
                                target: dep.at_most.clone(),
                            })?;
                        let both_ordinal = choice.kind == ChoiceKind::Ordinal
                            && module.choices[target].kind == ChoiceKind::Ordinal;
                        if !both_ordinal {
                            return Err(SpaceError::DanglingDependency {
                                path,
                                target: dep.at_most.clone(),
                            });
                        }
                        Some(base + target)
                    }
                };
                slots.push(Slot {
                    module: mi,
                    choice: ci,
                    bound,
                });
            }
        }

        let mut space = CompositeSpace {
            space_id,
            task_metric: task_metric.into(),
            modules,
            slots,
            groups: Vec::new(),
        };
        space.groups = space.build_groups();
        if space.groups.iter().any(|g| g.valid.is_empty()) {
            return Err(SpaceError::EmptySpace(space.space_id.clone()));
        }
        // Defaults are checked after the layout exists so dependency rules apply.
        if let Some(defaults) = space.default_indices_unchecked()? {
            if !space.indices_valid(&defaults) {
                return Err(SpaceError::BadDefault {
                    path: space.space_id.clone(),
                    value: "defaults violate a dependency rule".into(),
                });
            }
        }
        Ok(space)
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    /// Human-readable name of the benchmark's task metric.
    pub fn task_metric(&self) -> &str {
        &self.task_metric
    }

    pub fn modules(&self) -> &[ModuleSpace] {
        &self.modules
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpace> {
        self.modules.iter().find(|m| m.name == name)
    }

    /// Number of choices across all modules.
    pub fn num_choices(&self) -> usize {
        self.slots.len()
    }

    /// `(module, choice)` for each flat index, in canonical order.
    pub fn choices(&self) -> impl Iterator<Item = (&ModuleSpace, &ChoiceSpec)> + '_ {
        self.slots.iter().map(move |s| {
            let m = &self.modules[s.module];
            (m, &m.choices[s.choice])
        })
    }

    pub fn choice_at(&self, flat: usize) -> (&ModuleSpace, &ChoiceSpec) {
        let s = &self.slots[flat];
        let m = &self.modules[s.module];
        (m, &m.choices[s.choice])
    }

    /// `module.choice` path of a flat index.
    pub fn path(&self, flat: usize) -> String {
        let (m, c) = self.choice_at(flat);
        format!("{}.{}", m.name, c.name)
    }

    /// Flat index range belonging to module `mi`.
    pub fn module_range(&self, mi: usize) -> std::ops::Range<usize> {
        let start = self.slots.iter().position(|s| s.module == mi).unwrap_or(0);
        start..start + self.modules[mi].choices.len()
    }

    /// A space holding only the named module.
    pub fn module_subspace(&self, name: &str) -> Result<CompositeSpace, SpaceError> {
        let module = self
            .module(name)
            .ok_or_else(|| SpaceError::UnknownModule(name.to_string()))?;
        CompositeSpace::new(
            format!("{}/{}", self.space_id, name),
            self.task_metric.clone(),
            vec![module.clone()],
        )
    }

    fn build_groups(&self) -> Vec<Group> {
        let n = self.slots.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            parent[x] = r;
            r
        }
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(b) = s.bound {
                let (ri, rb) = (find(&mut parent, i), find(&mut parent, b));
                parent[ri] = rb;
            }
        }
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            by_root.entry(r).or_default().push(i);
        }
        let mut groups: Vec<Group> = by_root
            .into_values()
            .map(|members| {
                let valid = self.valid_combinations(&members);
                Group { members, valid }
            })
            .collect();
        groups.sort_by_key(|g| g.members[0]);
        groups
    }

    fn valid_combinations(&self, members: &[usize]) -> Vec<Vec<usize>> {
        let sizes: Vec<usize> = members
            .iter()
            .map(|&f| self.choice_at(f).1.values.len())
            .collect();
        let mut out = Vec::new();
        let mut combo = vec![0usize; members.len()];
        let mut scratch = vec![0usize; self.slots.len()];
        loop {
            for (k, &f) in members.iter().enumerate() {
                scratch[f] = combo[k];
            }
            let ok = members.iter().all(|&f| self.slot_ok(&scratch, f));
            if ok {
                out.push(combo.clone());
            }
            if !odometer_step(&mut combo, &sizes) {
                break;
            }
        }
        out
    }

    fn slot_value(&self, flat: usize, idx: usize) -> &Value {
        &self.choice_at(flat).1.values[idx]
    }

    /// Whether the dependency rule of one slot holds for the given indices.
    fn slot_ok(&self, indices: &[usize], flat: usize) -> bool {
        match self.slots[flat].bound {
            None => true,
            Some(b) => {
                let lhs = self.slot_value(flat, indices[flat]).as_f64();
                let rhs = self.slot_value(b, indices[b]).as_f64();
                matches!((lhs, rhs), (Some(l), Some(r)) if l <= r)
            }
        }
    }

    /// Whether a flat index vector is in range and satisfies every rule.
    pub fn indices_valid(&self, indices: &[usize]) -> bool {
        indices.len() == self.slots.len()
            && indices
                .iter()
                .enumerate()
                .all(|(f, &i)| i < self.choice_at(f).1.values.len())
            && (0..self.slots.len()).all(|f| self.slot_ok(indices, f))
    }

    pub fn vector_from_indices(&self, indices: &[usize]) -> DesignVector {
        let mut v = DesignVector::default();
        for (f, &i) in indices.iter().enumerate() {
            let (m, c) = self.choice_at(f);
            v.set(&m.name, &c.name, c.values[i].clone());
        }
        v
    }

    /// Flat indices of a vector whose every value lies in its domain. Returns
    /// `None` if a choice is missing or out of domain; dependency rules are
    /// not checked here.
    pub fn indices_of(&self, v: &DesignVector) -> Option<Vec<usize>> {
        self.choices()
            .map(|(m, c)| v.get(&m.name, &c.name).and_then(|val| c.index_of(val)))
            .collect()
    }

    /// Exact number of valid design vectors.
    pub fn cardinality(&self) -> u128 {
        self.groups.iter().map(|g| g.valid.len() as u128).product()
    }

    pub fn validate(&self, v: &DesignVector) -> ValidationReport {
        let mut violations = Vec::new();
        for (name, choices) in v.modules() {
            match self.module(name) {
                None => violations.push(Violation::new(name, ViolationKind::UnknownModule)),
                Some(m) => {
                    for cname in choices.keys() {
                        if m.choice(cname).is_none() {
                            violations.push(Violation::new(
                                format!("{name}.{cname}"),
                                ViolationKind::UnknownChoice,
                            ));
                        }
                    }
                }
            }
        }
        let mut indices: Vec<Option<usize>> = Vec::with_capacity(self.slots.len());
        for (m, c) in self.choices() {
            let path = format!("{}.{}", m.name, c.name);
            match v.get(&m.name, &c.name) {
                None => {
                    violations.push(Violation::new(path, ViolationKind::Missing));
                    indices.push(None);
                }
                Some(val) => match c.index_of(val) {
                    None => {
                        let mut x = Violation::new(path, ViolationKind::OutOfDomain);
                        x.value = Some(val.clone());
                        violations.push(x);
                        indices.push(None);
                    }
                    Some(i) => indices.push(Some(i)),
                },
            }
        }
        for (f, slot) in self.slots.iter().enumerate() {
            let Some(b) = slot.bound else { continue };
            let (Some(i), Some(j)) = (indices[f], indices[b]) else {
                continue;
            };
            let lhs = self.slot_value(f, i).as_f64().unwrap_or(f64::NAN);
            let rhs = self.slot_value(b, j).as_f64().unwrap_or(f64::NAN);
            // NaN (non-numeric) counts as a violation.
            if lhs.partial_cmp(&rhs).is_none_or(|o| o.is_gt()) {
                let (_, c) = self.choice_at(f);
                let (_, target) = self.choice_at(b);
                violations.push(Violation {
                    path: self.path(f),
                    kind: ViolationKind::Dependency,
                    message: format!("dependency {} ≤ {}", c.name, target.name),
                    value: Some(self.slot_value(f, i).clone()),
                });
            }
        }
        ValidationReport { violations }
    }

    /// Valid vectors in canonical odometer order (last choice varies fastest),
    /// optionally truncated to `limit`.
    pub fn enumerate(&self, limit: Option<usize>) -> Enumerate<'_> {
        Enumerate {
            space: self,
            next: self.first_valid_from(vec![0; self.slots.len()]),
            remaining: limit,
        }
    }

    pub fn enumerate_indices(&self, limit: Option<usize>) -> EnumerateIndices<'_> {
        EnumerateIndices(self.enumerate(limit))
    }

    fn sizes(&self) -> Vec<usize> {
        self.choices().map(|(_, c)| c.values.len()).collect()
    }

    fn first_valid_from(&self, mut idx: Vec<usize>) -> Option<Vec<usize>> {
        let sizes = self.sizes();
        loop {
            if self.indices_valid(&idx) {
                return Some(idx);
            }
            if !odometer_step(&mut idx, &sizes) {
                return None;
            }
        }
    }

    /// Uniformly random valid vector as flat indices. Dependent choices are
    /// drawn jointly uniform over their valid combinations.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx = vec![0usize; self.slots.len()];
        for g in &self.groups {
            let combo = &g.valid[rng.random_range(0..g.valid.len())];
            for (k, &f) in g.members.iter().enumerate() {
                idx[f] = combo[k];
            }
        }
        idx
    }

    pub fn random_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DesignVector {
        let idx = self.sample_indices(rng);
        self.vector_from_indices(&idx)
    }

    /// Re-draws, jointly uniform, every dependency group that `indices`
    /// violates. Groups that already hold are left untouched.
    pub fn repair_indices<R: Rng + ?Sized>(&self, indices: &mut [usize], rng: &mut R) {
        for g in &self.groups {
            if g.members.len() < 2 {
                continue;
            }
            let current: Vec<usize> = g.members.iter().map(|&f| indices[f]).collect();
            if !g.valid.contains(&current) {
                let combo = &g.valid[rng.random_range(0..g.valid.len())];
                for (k, &f) in g.members.iter().enumerate() {
                    indices[f] = combo[k];
                }
            }
        }
    }

    /// All valid index vectors at Hamming distance one from `indices`.
    /// Ordinal choices move to adjacent values, categorical ones to any other.
    pub fn neighbor_indices(&self, indices: &[usize]) -> Result<Vec<Vec<usize>>, SpaceError> {
        if !self.indices_valid(indices) {
            return Err(SpaceError::InvalidVector(
                "neighbors requires a valid vector".into(),
            ));
        }
        let mut out = Vec::new();
        for (f, (_, c)) in self.choices().enumerate() {
            let cur = indices[f];
            let moves: Vec<usize> = match c.kind {
                ChoiceKind::Ordinal => [cur.checked_sub(1), Some(cur + 1)]
                    .into_iter()
                    .flatten()
                    .filter(|&i| i < c.values.len())
                    .collect(),
                ChoiceKind::Categorical => (0..c.values.len()).filter(|&i| i != cur).collect(),
            };
            for i in moves {
                let mut w = indices.to_vec();
                w[f] = i;
                if self.indices_valid(&w) {
                    out.push(w);
                }
            }
        }
        Ok(out)
    }

    pub fn neighbors(&self, v: &DesignVector) -> Result<Vec<DesignVector>, SpaceError> {
        let idx = self.checked_indices(v)?;
        Ok(self
            .neighbor_indices(&idx)?
            .iter()
            .map(|w| self.vector_from_indices(w))
            .collect())
    }

    /// Flat indices of a vector that must pass [`CompositeSpace::validate`].
    pub fn checked_indices(&self, v: &DesignVector) -> Result<Vec<usize>, SpaceError> {
        let report = self.validate(v);
        if !report.is_valid() {
            return Err(SpaceError::InvalidVector(report.summary()));
        }
        self.indices_of(v)
            .ok_or_else(|| SpaceError::InvalidVector("unresolvable vector".into()))
    }

    fn default_indices_unchecked(&self) -> Result<Option<Vec<usize>>, SpaceError> {
        let mut out = Vec::with_capacity(self.slots.len());
        let mut any_missing = false;
        for (m, c) in self.choices() {
            match &c.default {
                None => any_missing = true,
                Some(d) => match c.index_of(d) {
                    Some(i) => out.push(i),
                    None => {
                        return Err(SpaceError::BadDefault {
                            path: format!("{}.{}", m.name, c.name),
                            value: d.to_string(),
                        })
                    }
                },
            }
        }
        Ok(if any_missing { None } else { Some(out) })
    }

    pub fn has_defaults(&self) -> bool {
        self.choices().all(|(_, c)| c.default.is_some())
    }

    /// The expert configuration declared by the `default` fields.
    pub fn expert_default(&self) -> Result<DesignVector, SpaceError> {
        match self.default_indices_unchecked()? {
            Some(idx) => Ok(self.vector_from_indices(&idx)),
            None => Err(SpaceError::NoDefaults(self.space_id.clone())),
        }
    }
}

fn check_domain(path: &str, choice: &ChoiceSpec) -> Result<(), SpaceError> {
    if choice.values.is_empty() {
        return Err(SpaceError::EmptyDomain(path.to_string()));
    }
    for (i, v) in choice.values.iter().enumerate() {
        if choice.values[..i].contains(v) {
            return Err(SpaceError::DuplicateValue {
                path: path.to_string(),
                value: v.to_string(),
            });
        }
    }
    match choice.kind {
        ChoiceKind::Ordinal => {
            let nums: Option<Vec<f64>> = choice.values.iter().map(Value::as_f64).collect();
            let ok = nums.is_some_and(|xs| {
                xs.iter().all(|x| x.is_finite()) && xs.windows(2).all(|w| w[0] < w[1])
            });
            if !ok {
                return Err(SpaceError::NotIncreasing(path.to_string()));
            }
        }
        ChoiceKind::Categorical => {
            if choice.values.iter().any(|v| v.as_label().is_none()) {
                return Err(SpaceError::NotLabels(path.to_string()));
            }
        }
    }
    if let Some(d) = &choice.default {
        if choice.index_of(d).is_none() {
            return Err(SpaceError::BadDefault {
                path: path.to_string(),
                value: d.to_string(),
            });
        }
    }
    Ok(())
}

/// Advances `idx` like an odometer (last digit fastest). Returns false on wrap.
fn odometer_step(idx: &mut [usize], sizes: &[usize]) -> bool {
    for pos in (0..idx.len()).rev() {
        idx[pos] += 1;
        if idx[pos] < sizes[pos] {
            return true;
        }
        idx[pos] = 0;
    }
    false
}

pub struct Enumerate<'a> {
    space: &'a CompositeSpace,
    next: Option<Vec<usize>>,
    remaining: Option<usize>,
}

impl Enumerate<'_> {
    fn next_indices(&mut self) -> Option<Vec<usize>> {
        if self.remaining == Some(0) {
            return None;
        }
        let cur = self.next.take()?;
        let mut succ = cur.clone();
        if odometer_step(&mut succ, &self.space.sizes()) {
            self.next = self.space.first_valid_from(succ);
        }
        if let Some(r) = self.remaining.as_mut() {
            *r -= 1;
        }
        Some(cur)
    }
}

impl Iterator for Enumerate<'_> {
    type Item = DesignVector;

    fn next(&mut self) -> Option<DesignVector> {
        let idx = self.next_indices()?;
        Some(self.space.vector_from_indices(&idx))
    }
}

pub struct EnumerateIndices<'a>(Enumerate<'a>);

impl Iterator for EnumerateIndices<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        self.0.next_indices()
    }
}

/// One complete composite-architecture choice: module → choice → value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignVector {
    assignments: BTreeMap<String, BTreeMap<String, Value>>,
}

impl DesignVector {
    pub fn get(&self, module: &str, choice: &str) -> Option<&Value> {
        self.assignments.get(module)?.get(choice)
    }

    pub fn set(&mut self, module: &str, choice: &str, value: Value) {
        self.assignments
            .entry(module.to_string())
            .or_default()
            .insert(choice.to_string(), value);
    }

    pub fn modules(&self) -> &BTreeMap<String, BTreeMap<String, Value>> {
        &self.assignments
    }

    /// Number of `(module, choice)` assignments that differ.
    pub fn hamming(&self, other: &DesignVector) -> usize {
        let mut paths: HashSet<(&str, &str)> = HashSet::new();
        for (m, cs) in self.assignments.iter().chain(other.assignments.iter()) {
            for c in cs.keys() {
                paths.insert((m, c));
            }
        }
        paths
            .into_iter()
            .filter(|(m, c)| self.get(m, c) != other.get(m, c))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Missing,
    OutOfDomain,
    Dependency,
    UnknownModule,
    UnknownChoice,
}

impl ViolationKind {
    fn message(self) -> &'static str {
        match self {
            ViolationKind::Missing => "missing",
            ViolationKind::OutOfDomain => "out of domain",
            ViolationKind::Dependency => "dependency",
            ViolationKind::UnknownModule => "unknown module",
            ViolationKind::UnknownChoice => "unknown choice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

impl Violation {
    fn new(path: impl Into<String>, kind: ViolationKind) -> Self {
        Violation {
            path: path.into(),
            kind,
            message: kind.message().to_string(),
            value: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("{}: {}", v.path, v.message))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traffic() -> CompositeSpace {
        builtin_space("traffic").unwrap()
    }

    fn minigrid() -> CompositeSpace {
        builtin_space("minigrid").unwrap()
    }

    #[test]
    fn builtin_traffic_has_four_modules_of_four_choices() {
        let s = traffic();
        let names: Vec<_> = s.modules().iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["time", "traffic", "sequence", "fusion"]);
        assert!(s.modules().iter().all(|m| m.choices.len() == 4));
    }

    #[test]
    fn minigrid_declares_pooling_dependency() {
        let s = minigrid();
        let image = s.module("image").unwrap();
        let dep = image.choice("pooling_layer").unwrap().dependency.as_ref();
        assert_eq!(dep.unwrap().at_most, "depth");
    }

    #[test]
    fn empty_domain_is_rejected() {
        let doc = r#"{"space_id":"x","modules":[{"name":"a","family":"ffn",
            "choices":[{"name":"depth","kind":"ordinal","values":[]}]}]}"#;
        let err = load_space(doc).unwrap_err();
        assert!(err.to_string().contains("empty domain"), "{err}");
    }

    #[test]
    fn structural_errors() {
        let dup = r#"{"space_id":"x","modules":[
            {"name":"a","family":"ffn","choices":[{"name":"d","kind":"ordinal","values":[1]}]},
            {"name":"a","family":"ffn","choices":[{"name":"d","kind":"ordinal","values":[1]}]}]}"#;
        assert!(matches!(
            load_space(dup),
            Err(SpaceError::DuplicateModule(_))
        ));

        let dangling = r#"{"space_id":"x","modules":[{"name":"a","family":"ffn","choices":[
            {"name":"p","kind":"ordinal","values":[1,2],"dependency":{"at_most":"nope"}}]}]}"#;
        assert!(matches!(
            load_space(dangling),
            Err(SpaceError::DanglingDependency { .. })
        ));

        let unordered = r#"{"space_id":"x","modules":[{"name":"a","family":"ffn","choices":[
            {"name":"p","kind":"ordinal","values":[2,1]}]}]}"#;
        assert!(matches!(
            load_space(unordered),
            Err(SpaceError::NotIncreasing(_))
        ));

        let dup_value = r#"{"space_id":"x","modules":[{"name":"a","family":"ffn","choices":[
            {"name":"p","kind":"categorical","values":["a","a"]}]}]}"#;
        assert!(matches!(
            load_space(dup_value),
            Err(SpaceError::DuplicateValue { .. })
        ));

        assert!(matches!(
            load_space("{not json"),
            Err(SpaceError::Malformed(_))
        ));
    }

    #[test]
    fn impossible_dependency_leaves_empty_space() {
        let doc = r#"{"space_id":"x","modules":[{"name":"a","family":"ffn","choices":[
            {"name":"p","kind":"ordinal","values":[5,6],"dependency":{"at_most":"d"}},
            {"name":"d","kind":"ordinal","values":[1,2]}]}]}"#;
        assert!(matches!(load_space(doc), Err(SpaceError::EmptySpace(_))));
    }

    #[test]
    fn expert_defaults_validate() {
        for id in ["traffic", "minigrid"] {
            let s = builtin_space(id).unwrap();
            let v = s.expert_default().unwrap();
            assert!(s.validate(&v).is_valid(), "{id}");
        }
    }

    #[test]
    fn expert_traffic_matches_bold_values() {
        let v = traffic().expert_default().unwrap();
        let n = |m: &str, c: &str| v.get(m, c).unwrap().as_f64().unwrap();
        let l = |m: &str, c: &str| v.get(m, c).unwrap().as_label().unwrap().to_string();
        assert_eq!(
            [
                n("time", "heads"),
                n("time", "dimension"),
                n("time", "ratio"),
                n("time", "depth")
            ],
            [2.0, 8.0, 2.0, 2.0]
        );
        assert_eq!(l("traffic", "activation"), "relu");
        assert_eq!(
            [
                n("traffic", "dimension"),
                n("traffic", "ratio"),
                n("traffic", "depth")
            ],
            [32.0, 1.0, 1.0]
        );
        assert_eq!(
            [
                n("sequence", "heads"),
                n("sequence", "dimension"),
                n("sequence", "ratio"),
                n("sequence", "depth")
            ],
            [4.0, 16.0, 2.0, 2.0]
        );
        assert_eq!(l("fusion", "activation"), "relu");
        assert_eq!(
            [
                n("fusion", "dimension"),
                n("fusion", "ratio"),
                n("fusion", "depth")
            ],
            [128.0, 1.0, 1.0]
        );
    }

    #[test]
    fn expert_minigrid_matches_bold_values() {
        let v = minigrid().expert_default().unwrap();
        let get = |m: &str, c: &str| v.get(m, c).unwrap().to_string();
        assert_eq!(get("image", "pooling_type"), "max");
        assert_eq!(get("image", "pooling_layer"), "1");
        assert_eq!(get("image", "activation"), "sigmoid");
        assert_eq!(get("image", "kernel_size"), "2");
        assert_eq!(get("image", "channel_number"), "16");
        assert_eq!(get("image", "depth"), "3");
        assert_eq!(get("text", "dimension"), "32");
        assert_eq!(get("text", "hidden_size"), "128");
        assert_eq!(v.get("text", "dropout"), Some(&Value::Number(0.0)));
        assert_eq!(get("text", "depth"), "1");
        assert_eq!(get("fusion", "merge_type"), "cat");
        assert_eq!(get("fusion", "dimension"), "128");
        assert_eq!(get("fusion", "activation"), "sigmoid");
        assert_eq!(get("fusion", "hidden_size"), "64");
    }

    #[test]
    fn space_without_defaults_errors() {
        let s = builtin_space("maniskill").unwrap();
        assert!(matches!(s.expert_default(), Err(SpaceError::NoDefaults(_))));
    }

    #[test]
    fn out_of_domain_heads_is_one_violation() {
        let s = traffic();
        let mut v = s.expert_default().unwrap();
        v.set("time", "heads", Value::Number(5.0));
        let r = s.validate(&v);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].path, "time.heads");
        assert_eq!(r.violations[0].message, "out of domain");
    }

    #[test]
    fn dependency_violation_is_one_violation() {
        let s = minigrid();
        let mut v = s.expert_default().unwrap();
        v.set("image", "depth", Value::Number(2.0));
        v.set("image", "pooling_layer", Value::Number(3.0));
        let r = s.validate(&v);
        assert_eq!(r.violations.len(), 1, "{r:?}");
        assert_eq!(r.violations[0].message, "dependency pooling_layer ≤ depth");
    }

    #[test]
    fn missing_and_unknown_entries_are_reported() {
        let s = traffic();
        let mut v = s.expert_default().unwrap();
        v.set("bogus", "x", Value::Number(1.0));
        v.set("time", "colour", Value::Label("red".into()));
        let r = s.validate(&v);
        let kinds: Vec<_> = r.violations.iter().map(|x| x.kind).collect();
        assert!(kinds.contains(&ViolationKind::UnknownModule));
        assert!(kinds.contains(&ViolationKind::UnknownChoice));
        assert!(s.validate(&DesignVector::default()).violations.len() == 16);
    }

    #[test]
    fn module_cardinalities() {
        let s = traffic();
        assert_eq!(s.module_subspace("time").unwrap().cardinality(), 81);
        assert_eq!(s.cardinality(), 43_046_721);
        let m = minigrid();
        assert_eq!(m.module_subspace("image").unwrap().cardinality(), 896);
        assert_eq!(m.cardinality(), 896 * 256 * 256);
    }

    #[test]
    fn enumerate_time_module_exhaustively() {
        let s = traffic().module_subspace("time").unwrap();
        let all: Vec<_> = s.enumerate_indices(None).collect();
        assert_eq!(all.len(), 81);
        let distinct: HashSet<_> = all.iter().cloned().collect();
        assert_eq!(distinct.len(), 81);
    }

    #[test]
    fn enumerate_first_is_lowest_index() {
        for id in BUILTIN_SPACES {
            let s = builtin_space(id).unwrap();
            let first: Vec<_> = s.enumerate_indices(Some(1)).collect();
            assert_eq!(first, vec![vec![0; s.num_choices()]]);
        }
    }

    #[test]
    fn enumerate_image_module_respects_dependency() {
        let s = minigrid().module_subspace("image").unwrap();
        let all: Vec<_> = s.enumerate(None).collect();
        assert_eq!(all.len(), 896);
        assert!(all.iter().all(|v| s.validate(v).is_valid()));
    }

    #[test]
    fn sampling_is_seeded() {
        let s = minigrid();
        let a = s.random_sample(&mut ChaCha8Rng::seed_from_u64(11));
        let b = s.random_sample(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn binary_choice_has_one_neighbor() {
        let doc = r#"{"space_id":"bin","modules":[{"name":"a","family":"ffn","choices":[
            {"name":"flag","kind":"ordinal","values":[0,1]}]}]}"#;
        let s = load_space(doc).unwrap();
        let n = s.neighbor_indices(&[0]).unwrap();
        assert_eq!(n, vec![vec![1]]);
    }

    #[test]
    fn depth_cannot_move_below_minimum() {
        let s = minigrid().module_subspace("image").unwrap();
        let mut v = s.enumerate(Some(1)).next().unwrap();
        v.set("image", "depth", Value::Number(2.0));
        v.set("image", "pooling_layer", Value::Number(2.0));
        let ns = s.neighbors(&v).unwrap();
        // depth may only go up; pooling_layer may only go down (3 > depth).
        let depths: Vec<_> = ns
            .iter()
            .filter(|w| w.get("image", "depth") != v.get("image", "depth"))
            .map(|w| w.get("image", "depth").unwrap().as_f64().unwrap())
            .collect();
        assert_eq!(depths, vec![3.0]);
        let pools: Vec<_> = ns
            .iter()
            .filter(|w| w.get("image", "pooling_layer") != v.get("image", "pooling_layer"))
            .map(|w| w.get("image", "pooling_layer").unwrap().as_f64().unwrap())
            .collect();
        assert_eq!(pools, vec![1.0]);
    }

    #[test]
    fn neighbors_of_invalid_vector_error() {
        let s = traffic();
        let mut v = s.expert_default().unwrap();
        v.set("time", "heads", Value::Number(5.0));
        assert!(s.neighbors(&v).is_err());
    }

    #[test]
    fn repair_fixes_dependency_groups_only() {
        let s = minigrid().module_subspace("image").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // pooling_layer index 4 (=5) with depth index 0 (=2) is invalid.
        let mut idx = vec![1, 4, 2, 1, 3, 0];
        s.repair_indices(&mut idx, &mut rng);
        assert!(s.indices_valid(&idx));
        assert_eq!((idx[0], idx[2], idx[3], idx[4]), (1, 2, 1, 3));
    }
}
