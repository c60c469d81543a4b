use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Read;

use rand::Rng;

use super::BackboneConfig;
use crate::container;
use crate::diffcore::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor `f_b`.
    Trunk,
    /// Classification layer `f_φ`.
    Head,
}

/// Which parameter groups receive gradients when binding to a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub trunk: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Self = Self {
        trunk: false,
        head: false,
    };
    pub const ALL: Self = Self { trunk: true, head: true };
    pub const HEAD: Self = Self {
        trunk: false,
        head: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

// Index layout of the flat entry list.
pub(crate) const PATCH_W: usize = 0;
pub(crate) const PATCH_B: usize = 1;
pub(crate) const CLS: usize = 2;
pub(crate) const POS: usize = 3;
pub(crate) const BLOCK_BASE: usize = 4;
pub(crate) const BLOCK_FIELDS: usize = 12;
const BLOCK_NAMES: [&str; BLOCK_FIELDS] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// All backbone weights as a flat, ordered list of named tensors, plus the
/// freeze state of each group.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub(crate) entries: Vec<Entry>,
    depth: usize,
    trunk_frozen: bool,
    head_frozen: bool,
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], -a, a, rng)
}

impl BackboneParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let mut entries = Vec::new();
        let mut push = |name: String, tensor: Tensor, group| entries.push(Entry { name, tensor, group });
        push("patch.weight".into(), xavier(cfg.patch_dim(), m, rng), ParamGroup::Trunk);
        push("patch.bias".into(), Tensor::zeros([m]), ParamGroup::Trunk);
        push("cls_token".into(), Tensor::uniform([1, m], -0.02, 0.02, rng), ParamGroup::Trunk);
        push(
            "pos_embed".into(),
            Tensor::uniform([cfg.num_patches() + 1, m], -0.02, 0.02, rng),
            ParamGroup::Trunk,
        );
        for layer in 1..=cfg.depth {
            let tensors = [
                Tensor::full([m], 1.0),
                Tensor::zeros([m]),
                xavier(m, 3 * m, rng),
                Tensor::zeros([3 * m]),
                xavier(m, m, rng),
                Tensor::zeros([m]),
                Tensor::full([m], 1.0),
                Tensor::zeros([m]),
                xavier(m, hidden, rng),
                Tensor::zeros([hidden]),
                xavier(hidden, m, rng),
                Tensor::zeros([m]),
            ];
            for (field, t) in BLOCK_NAMES.iter().zip(tensors) {
                push(format!("blocks.{layer}.{field}"), t, ParamGroup::Trunk);
            }
        }
        push("norm.gamma".into(), Tensor::full([m], 1.0), ParamGroup::Trunk);
        push("norm.beta".into(), Tensor::zeros([m]), ParamGroup::Trunk);
        push("head.weight".into(), xavier(m, cfg.num_classes, rng), ParamGroup::Head);
        push("head.bias".into(), Tensor::zeros([cfg.num_classes]), ParamGroup::Head);
        Ok(Self {
            entries,
            depth: cfg.depth,
            trunk_frozen: false,
            head_frozen: false,
        })
    }

    pub(crate) fn norm_index(&self) -> usize {
        BLOCK_BASE + self.depth * BLOCK_FIELDS
    }

    /// Position of the head weight in [`BackboneParams::bind`] output; the
    /// head bias follows it.
    pub fn head_index(&self) -> usize {
        self.norm_index() + 2
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.entries[index].group
    }

    pub fn trunk_frozen(&self) -> bool {
        self.trunk_frozen
    }

    pub fn head_frozen(&self) -> bool {
        self.head_frozen
    }

    pub fn freeze_trunk(&mut self) {
        self.trunk_frozen = true;
    }

    pub fn freeze_head(&mut self) {
        self.head_frozen = true;
    }

    pub fn num_parameters(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Order-sensitive hash of the bit patterns of one group.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            e.name.hash(&mut h);
            e.tensor.shape().hash(&mut h);
            for v in e.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Puts every tensor on `tape`. Frozen groups never require grad, even if
    /// `trainable` asks for them.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: Trainable) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                let wants = match e.group {
                    ParamGroup::Trunk => trainable.trunk && !self.trunk_frozen,
                    ParamGroup::Head => trainable.head && !self.head_frozen,
                };
                tape.leaf(T::lift(&e.tensor), wants)
            })
            .collect()
    }

    /// Indices of entries that `bind` marks as requiring grad.
    pub fn trainable_indices(&self, trainable: Trainable) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| match self.entries[i].group {
                ParamGroup::Trunk => trainable.trunk && !self.trunk_frozen,
                ParamGroup::Head => trainable.head && !self.head_frozen,
            })
            .collect()
    }

    pub fn encoded_len(&self) -> usize {
        container::encoded_len(self.tensors())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(self.tensors())
    }

    /// Loads weights written by [`BackboneParams::to_bytes`], checking names
    /// and shapes against a layout built from `cfg`. The trunk comes back
    /// frozen and the head trainable.
    pub fn from_reader<R: Read>(cfg: &BackboneConfig, reader: R) -> Result<Self> {
        let mut layout = Self::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let tensors = container::read_tensors(reader)?;
        if tensors.len() != layout.entries.len() {
            return Err(Error::Shape {
                context: "checkpoint".into(),
                expected: format!("{} tensors", layout.entries.len()),
                actual: format!("{}", tensors.len()),
            });
        }
        for (entry, (name, tensor)) in layout.entries.iter_mut().zip(tensors) {
            if entry.name != name || entry.tensor.shape() != tensor.shape() {
                return Err(Error::Shape {
                    context: "checkpoint".into(),
                    expected: format!("{} {:?}", entry.name, entry.tensor.shape()),
                    actual: format!("{} {:?}", name, tensor.shape()),
                });
            }
            entry.tensor = tensor;
        }
        layout.trunk_frozen = true;
        Ok(layout)
    }
}
