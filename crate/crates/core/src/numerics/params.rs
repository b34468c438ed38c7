use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape};
use crate::numerics::tensor::Tensor;

/// Parameter groups realizing the fine-tuning disentanglement strategy:
/// freezing and training are decided per group, never per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    PixelDecoder,
    MaskMlp,
    ClassLinear,
    PromptProjection,
    QueryInit,
    Pra,
    VoidEmbedding,
    DistributionPrompts,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::PixelDecoder,
        ParamGroup::MaskMlp,
        ParamGroup::ClassLinear,
        ParamGroup::PromptProjection,
        ParamGroup::QueryInit,
        ParamGroup::Pra,
        ParamGroup::VoidEmbedding,
        ParamGroup::DistributionPrompts,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::PixelDecoder => "pixel-decoder",
            ParamGroup::MaskMlp => "mask-mlp",
            ParamGroup::ClassLinear => "class-linear",
            ParamGroup::PromptProjection => "prompt-projection",
            ParamGroup::QueryInit => "query-init",
            ParamGroup::Pra => "pra",
            ParamGroup::VoidEmbedding => "void-embedding",
            ParamGroup::DistributionPrompts => "distribution-prompts",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        ParamGroup::ALL.iter().copied().find(|g| g.tag() == tag)
    }
}

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A tensor value with a same-shaped gradient accumulator, a trainable
/// flag, and a group tag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters. Registration order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Bind a parameter onto a tape as a leaf carrying its current value.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> crate::numerics::tape::Var {
        tape.param(id, self.params[id.0].value.clone())
    }

    /// Mark exactly the given groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    /// Add tape gradients into the parameter accumulators. Calling twice
    /// without `zero_grads` doubles them.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for &(var_idx, pid) in tape.param_bindings() {
            if let Some(g) = grads.get(crate::numerics::tape::Var(var_idx)) {
                let dst = &mut self.params[pid.0].grad;
                for (d, &s) in dst.values_mut().iter_mut().zip(g.values()) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for v in p.grad.values_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if !p.value.all_finite() {
                return Err(Error::NonFinite { op: "parameter" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_shape_matches_value_shape() {
        let mut store = ParamStore::new();
        let id = store.register("w", ParamGroup::Pra, Tensor::zeros(vec![2, 3]));
        assert_eq!(store.get(id).grad.shape(), &[2, 3]);
    }

    #[test]
    fn accumulate_twice_doubles() {
        let mut store = ParamStore::new();
        let id = store.register(
            "p",
            ParamGroup::Pra,
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let v = store.bind(&mut tape, id);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        store.accumulate(&tape, &grads);
        assert_eq!(store.get(id).grad.values(), &[2.0, 4.0]);
        store.accumulate(&tape, &grads);
        assert_eq!(store.get(id).grad.values(), &[4.0, 8.0]);
        store.zero_grads();
        assert_eq!(store.get(id).grad.values(), &[0.0, 0.0]);
    }

    #[test]
    fn group_tags_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_tag(g.tag()), Some(g));
        }
        assert_eq!(ParamGroup::from_tag("nope"), None);
    }
}
