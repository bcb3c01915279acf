//! Instance documents: a JSON record of everything needed to rebuild a
//! teacher bit for bit. Floats are stored as their IEEE-754 bit patterns in
//! hex (`"0x3ff0000000000000"` is 1.0).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BaseModel, CMode, NeuronScaling, Perturbation, TeacherModel};
use crate::error::{Error, Result};
use crate::hermite::{Activation, ActivationKind, Table};

/// How the base rows were generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRegime {
    Orthonormal,
    /// Rows uniform on the sphere, no separation check.
    Random,
    Separated,
    Hardness,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationDocument {
    pub name: String,
    pub order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDocument {
    #[serde(with = "hex_vec")]
    pub xs: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub k: usize,
    pub d: usize,
    #[serde(with = "hex_f64")]
    pub xi: f64,
    #[serde(default, with = "hex_opt")]
    pub xi_bar: Option<f64>,
    pub activation: ActivationDocument,
    /// Row-major k x d.
    #[serde(rename = "W", with = "hex_vec")]
    pub w: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub lambda: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub c: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub u: Vec<f64>,
    pub scaling: NeuronScaling,
    pub c_mode: CMode,
    pub regime: WeightRegime,
    pub seed: Option<u64>,
}

impl InstanceDocument {
    pub fn from_teacher(
        teacher: &TeacherModel,
        c_mode: CMode,
        regime: WeightRegime,
        seed: Option<u64>,
    ) -> Self {
        let base = &teacher.base;
        let act = base.activation();
        let table = match act.kind() {
            ActivationKind::Tabulated(t) => Some(TableDocument {
                xs: t.xs.clone(),
                ys: t.ys.clone(),
            }),
            _ => None,
        };
        InstanceDocument {
            k: base.k(),
            d: base.d(),
            xi: teacher.pert.xi,
            xi_bar: teacher.pert.xi_bar,
            activation: ActivationDocument {
                name: act.name(),
                order: act.truncation_order(),
                table,
            },
            w: base.w().transpose().iter().copied().collect(),
            lambda: base.lambda().iter().copied().collect(),
            c: teacher.pert.c.iter().copied().collect(),
            u: teacher.pert.u.iter().copied().collect(),
            scaling: teacher.scaling,
            c_mode,
            regime,
            seed,
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        match &self.activation.table {
            Some(t) => Activation::tabulated(Table::new(t.xs.clone(), t.ys.clone())?, self.activation.order),
            None => Activation::from_name(&self.activation.name, self.activation.order),
        }
    }

    pub fn teacher(&self) -> Result<TeacherModel> {
        let shape = |what: &str, got: usize, want: usize| -> Result<()> {
            if got == want {
                Ok(())
            } else {
                Err(Error::Format {
                    what: "instance document",
                    detail: format!("{what} has {got} entries, expected {want}"),
                })
            }
        };
        shape("W", self.w.len(), self.k * self.d)?;
        shape("lambda", self.lambda.len(), self.k)?;
        shape("c", self.c.len(), self.k)?;
        shape("u", self.u.len(), self.d)?;
        let w = DMatrix::from_row_slice(self.k, self.d, &self.w);
        let base = BaseModel::new(w, DVector::from_column_slice(&self.lambda), self.activation()?)?;
        let mut pert = Perturbation::new(
            self.xi,
            DVector::from_column_slice(&self.c),
            DVector::from_column_slice(&self.u),
        )?;
        pert.xi_bar = self.xi_bar;
        TeacherModel::new(base, pert, self.scaling)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn f64_to_hex(v: f64) -> String {
    format!("0x{:016x}", v.to_bits())
}

pub fn f64_from_hex(s: &str) -> std::result::Result<f64, String> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| format!("expected 0x-prefixed hex float, got {s:?}"))?;
    u64::from_str_radix(digits, 16)
        .map(f64::from_bits)
        .map_err(|e| format!("bad hex float {s:?}: {e}"))
}

pub(crate) mod hex_f64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::f64_to_hex(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        super::f64_from_hex(&s).map_err(D::Error::custom)
    }
}

pub(crate) mod hex_opt {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&super::f64_to_hex(*v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| super::f64_from_hex(&s).map_err(D::Error::custom))
            .transpose()
    }
}

pub(crate) mod hex_vec {
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&super::f64_to_hex(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| super::f64_from_hex(s).map_err(D::Error::custom))
            .collect()
    }
}
