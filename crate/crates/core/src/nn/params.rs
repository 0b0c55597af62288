//! Parameter storage and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Weight,
    /// Architecture parameters (mixed-operation logits).
    Arch,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Excluded from weight decay (biases, affine shifts).
    pub no_decay: bool,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, no_decay: false, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_no_decay(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = self.add(name, ParamGroup::Weight, value);
        self.params[id.0].no_decay = true;
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Total number of scalars in a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Saves every parameter as `<dir>/<index>_<name>.orbt`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (id, p) in self.iter() {
            let name: String = p.name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let file = std::fs::File::create(dir.join(format!("{:04}_{name}.orbt", id.0)))?;
            p.value.write_orbt(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save_dir`] into an identically
    /// shaped store.
    pub fn load_dir(&mut self, dir: &std::path::Path) -> Result<()> {
        for i in 0..self.params.len() {
            let prefix = format!("{i:04}_");
            let entry = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .find(|e| e.file_name().to_string_lossy().starts_with(&prefix))
                .ok_or_else(|| Error::Format(format!("no saved tensor for parameter {i}")))?;
            let t = Tensor::read_orbt(std::io::BufReader::new(std::fs::File::open(entry.path())?))?;
            if t.dims() != self.params[i].value.dims() {
                return Err(Error::Format(format!(
                    "parameter {i} saved as {:?}, model expects {:?}",
                    t.dims(),
                    self.params[i].value.dims()
                )));
            }
            self.params[i].value = t;
        }
        Ok(())
    }
}

/// Kaiming-uniform (fan-in) initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data).expect("non-empty dims")
}
