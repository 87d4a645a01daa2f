use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Icnn, IcnnArch, IcnnParams, Layer};
use crate::error::{Error, Result};

pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wz: Option<Vec<Vec<f64>>>,
    wy: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// On-disk form of an [`Icnn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcnnFile {
    format: u32,
    arch: IcnnArch,
    layers: Vec<LayerFile>,
    skip: Vec<Vec<f64>>,
    lambda: f64,
    delta: f64,
}

fn nested(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_nested(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::ConfigInvalid(format!("{what}: ragged rows")));
    }
    Array2::from_shape_vec((r, c), rows.concat()).map_err(|e| Error::ConfigInvalid(format!("{what}: {e}")))
}

impl From<&Icnn> for IcnnFile {
    fn from(net: &Icnn) -> Self {
        let p = &net.params;
        IcnnFile {
            format: FORMAT,
            arch: net.arch.clone(),
            layers: p
                .layers
                .iter()
                .map(|l| LayerFile { wz: l.wz.as_ref().map(nested), wy: nested(&l.wy), b: l.b.to_vec() })
                .collect(),
            skip: nested(&p.skip),
            lambda: p.lambda,
            delta: p.delta,
        }
    }
}

impl TryFrom<IcnnFile> for Icnn {
    type Error = Error;

    fn try_from(f: IcnnFile) -> Result<Self> {
        if f.format != FORMAT {
            return Err(Error::ConfigInvalid(format!("unsupported network format {}", f.format)));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (i, l) in f.layers.iter().enumerate() {
            layers.push(Layer {
                wz: l.wz.as_deref().map(|w| from_nested(w, &format!("layers[{i}].wz"))).transpose()?,
                wy: from_nested(&l.wy, &format!("layers[{i}].wy"))?,
                b: Array1::from(l.b.clone()),
            });
        }
        let params = IcnnParams { layers, skip: from_nested(&f.skip, "skip")?, lambda: f.lambda, delta: f.delta };
        Icnn::new(f.arch, params)
    }
}

impl Icnn {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&IcnnFile::from(self)).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: IcnnFile = serde_json::from_str(s)?;
        f.try_into()
    }
}
