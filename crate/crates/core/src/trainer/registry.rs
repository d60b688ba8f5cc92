use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Visual projection and the early visual gates.
    Caption,
    /// Prompts, prompt gates, norms, scales and biases.
    Instruction,
}

/// Disjoint partition of the adapter's learnable tensor names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroupRegistry {
    pub caption_group: BTreeSet<String>,
    pub instruction_group: BTreeSet<String>,
}

impl ParamGroupRegistry {
    pub fn group_of(&self, name: &str) -> Option<Group> {
        if self.caption_group.contains(name) {
            Some(Group::Caption)
        } else if self.instruction_group.contains(name) {
            Some(Group::Instruction)
        } else {
            None
        }
    }

    pub fn members(&self, group: Group) -> &BTreeSet<String> {
        match group {
            Group::Caption => &self.caption_group,
            Group::Instruction => &self.instruction_group,
        }
    }

    pub fn len(&self) -> usize {
        self.caption_group.len() + self.instruction_group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn classify(name: &str) -> Option<Group> {
    if name.starts_with("visual.") || name.ends_with(".visual.gate") {
        return Some(Group::Caption);
    }
    let language = name.ends_with(".attn.prompt")
        || name.ends_with(".attn.gate")
        || name.ends_with("norm.weight")
        || name.ends_with(".scale")
        || name.ends_with(".bias");
    language.then_some(Group::Instruction)
}

/// Assign every learnable adapter tensor to exactly one group.
pub fn build_registry(adapter: &AdapterState) -> Result<ParamGroupRegistry> {
    let mut reg = ParamGroupRegistry {
        caption_group: BTreeSet::new(),
        instruction_group: BTreeSet::new(),
    };
    for (name, t) in adapter.tensors() {
        if !t.requires_grad() {
            continue;
        }
        match classify(&name) {
            Some(Group::Caption) => reg.caption_group.insert(name),
            Some(Group::Instruction) => reg.instruction_group.insert(name),
            None => return Err(Error::Registry(format!("tensor {name} belongs to no parameter group"))),
        };
    }
    Ok(reg)
}
