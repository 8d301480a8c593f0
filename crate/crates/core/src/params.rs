use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Backbone,
    Head,
    LossWeight,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub tensor: Tensor,
    pub role: Role,
    /// Position in backbone order; present exactly for backbone parameters.
    pub layer_id: Option<usize>,
    pub penalizable: bool,
    /// For a bias vector: the conv weight whose output channels it shares.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_with: Option<ParamId>,
}

/// Owns every trainable tensor of a model. Ids are dense indices.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        name: String,
        tensor: Tensor,
        role: Role,
        layer_id: Option<usize>,
        penalizable: bool,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            id,
            name,
            tensor,
            role,
            layer_id,
            penalizable,
            group_with: None,
        });
        id
    }

    pub fn add_backbone(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        layer_id: usize,
        penalizable: bool,
    ) -> ParamId {
        self.push(name.into(), tensor, Role::Backbone, Some(layer_id), penalizable)
    }

    /// Bias of a backbone conv; it joins the weight's channel groups when
    /// the weight is penalizable.
    pub fn add_backbone_bias(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        weight: ParamId,
    ) -> ParamId {
        let (layer, penalizable) = {
            let w = self.get(weight);
            (w.layer_id.expect("backbone weight has a layer"), w.penalizable)
        };
        let id = self.push(name.into(), tensor, Role::Backbone, Some(layer), penalizable);
        self.params[id.0].group_with = Some(weight);
        id
    }

    pub fn add_head(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, Role::Head, None, false)
    }

    pub fn add_loss_weight(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, Role::LossWeight, None, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total scalar count, optionally restricted to one role.
    pub fn count(&self, role: Option<Role>) -> usize {
        self.params
            .iter()
            .filter(|p| role.is_none_or(|r| p.role == r))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn count_nonzero(&self, role: Option<Role>) -> usize {
        self.params
            .iter()
            .filter(|p| role.is_none_or(|r| p.role == r))
            .map(|p| p.tensor.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

/// Gradient map keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn require(&self, store: &ParamStore, id: ParamId) -> Result<&Tensor> {
        self.map
            .get(&id)
            .ok_or_else(|| Error::MissingGradient(store.get(id).name.clone()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    /// Adds `other` into `self`, inserting entries missing on this side.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }
}
