//! Versioned JSON checkpoints.
//!
//! Parameter values are written with 17 significant digits, which is enough
//! for every double to read back bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::OptimState;

/// Format tag written into and required from every checkpoint.
pub const CHECKPOINT_FORMAT: &str = "unicornn-ckpt-1";

/// Free-form run information stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub task: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// A model together with optional optimizer state and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimState>,
    /// Seed the run was started from.
    pub seed: u64,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            seed: 0,
            meta: CheckpointMeta::default(),
        }
    }

    /// Fails unless the stored architecture is `expected`, naming the first
    /// layer that differs.
    pub fn check_against(&self, expected: &ModelConfig) -> Result<()> {
        let got = &self.model.config;
        for l in 0..got.layers.max(expected.layers) {
            let name = l + 1;
            if l >= got.layers {
                return Err(Error::Checkpoint(format!(
                    "layer {name} is expected by the configuration but absent from the checkpoint"
                )));
            }
            if l >= expected.layers {
                return Err(Error::Checkpoint(format!(
                    "layer {name} is present in the checkpoint but not expected by the configuration"
                )));
            }
            let shape = |c: &ModelConfig| (c.hidden, c.layer_input_dim(l), c.skip_source(l));
            if shape(got) != shape(expected) {
                return Err(Error::Checkpoint(format!(
                    "layer {name}: checkpoint has hidden {} and input {}, configuration expects hidden {} and input {}",
                    got.hidden,
                    got.layer_input_dim(l),
                    expected.hidden,
                    expected.layer_input_dim(l)
                )));
            }
        }
        if got != expected {
            return Err(Error::Checkpoint(
                "checkpoint hyperparameters differ from the configuration".into(),
            ));
        }
        Ok(())
    }
}

fn seventeen_digits<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::{Error as _, SerializeSeq};
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for v in values {
        if !v.is_finite() {
            return Err(S::Error::custom(format!("cannot store non-finite value {v}")));
        }
        let raw = RawValue::from_string(format!("{v:.16e}")).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    #[serde(serialize_with = "seventeen_digits")]
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    config: ModelConfig,
    params: Vec<Tensor>,
    optimizer: Option<OptimState>,
    seed: u64,
    meta: CheckpointMeta,
}

fn to_document(ckpt: &Checkpoint) -> Document {
    let mut meta = ckpt.meta.clone();
    meta.metrics.retain(|_, v| v.is_finite());
    Document {
        format: CHECKPOINT_FORMAT.into(),
        config: ckpt.model.config.clone(),
        params: ckpt
            .model
            .tensors()
            .into_iter()
            .map(|(name, t)| Tensor {
                name,
                values: t.to_vec(),
            })
            .collect(),
        optimizer: ckpt.optimizer.clone(),
        seed: ckpt.seed,
        meta,
    }
}

/// Serializes a checkpoint to its JSON text.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    ckpt.model.validate()?;
    serde_json::to_string_pretty(&to_document(ckpt)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses checkpoint text; `origin` names the source in error messages.
pub fn checkpoint_from_str(text: &str, origin: &Path) -> Result<Checkpoint> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::parse(origin, Some(e.line()), e.to_string()))?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{other}', expected '{CHECKPOINT_FORMAT}'"
            )))
        }
        None => return Err(Error::Checkpoint("document has no format tag".into())),
    }
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::parse(origin, Some(e.line()), e.to_string()))?;
    let mut model =
        Model::zeros(doc.config).map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    let slots = model.tensors_mut();
    if slots.len() != doc.params.len() {
        return Err(Error::Checkpoint(format!(
            "configuration implies {} parameter tensors, checkpoint has {}",
            slots.len(),
            doc.params.len()
        )));
    }
    for ((name, slot), t) in slots.into_iter().zip(&doc.params) {
        if name != t.name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", t.name)));
        }
        if slot.len() != t.values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {} values, configuration implies {}",
                t.values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&t.values);
    }
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(opt) = &doc.optimizer {
        let lens: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        let ok = opt.m.len() == opt.v.len()
            && (opt.m.is_empty() || opt.m.iter().map(Vec::len).eq(lens.iter().copied()))
            && (opt.v.is_empty() || opt.v.iter().map(Vec::len).eq(lens.iter().copied()));
        if !ok {
            return Err(Error::Checkpoint(
                "optimizer buffers do not mirror the parameters".into(),
            ));
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: doc.optimizer,
        seed: doc.seed,
        meta: doc.meta,
    })
}

/// Writes a checkpoint, replacing `path` only once the new file is complete.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReadoutSite;
    use crate::train::{init_params, OptimizerKind};

    fn sample(layers: usize) -> Checkpoint {
        let cfg = ModelConfig::new(layers, 5, 3, 2, 0.042, 1.5, ReadoutSite::PerStep).with_dropout(0.25);
        let mut model = init_params(&cfg, 11).unwrap();
        model.layers[0].b[1] = 1.0 / 3.0;
        model.layers[0].w[0] = 5e-324;
        let mut opt = OptimState::new(OptimizerKind::Adam, 1e-3, &model);
        opt.step = 7;
        opt.m[0][0] = -0.1;
        let mut meta = CheckpointMeta {
            task: "lorenz96".into(),
            epoch: 4,
            ..Default::default()
        };
        meta.metrics.insert("valid.nrmse".into(), 0.031);
        Checkpoint {
            model,
            optimizer: Some(opt),
            seed: 99,
            meta,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = sample(2);
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        for ((_, a), (_, b)) in c.model.tensors().into_iter().zip(back.model.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, c);
    }

    #[test]
    fn values_carry_seventeen_significant_digits() {
        let text = checkpoint_to_string(&sample(1)).unwrap();
        assert!(text.contains("\"format\": \"unicornn-ckpt-1\""));
        assert!(
            text.contains("3.3333333333333331e-1"),
            "one third written with 17 digits"
        );
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = checkpoint_to_string(&sample(1))
            .unwrap()
            .replace("unicornn-ckpt-1", "unicornn-ckpt-9");
        let err = checkpoint_from_str(&text, Path::new("x.json")).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(ref m) if m.contains("unicornn-ckpt-9")),
            "{err}"
        );
    }

    #[test]
    fn corrupted_and_truncated_documents_fail_loudly() {
        let text = checkpoint_to_string(&sample(1)).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            checkpoint_from_str(truncated, Path::new("t")),
            Err(Error::Parse { .. })
        ));
        let corrupted = text.replacen("\"seed\": 99", "\"seed\": \"ninety-nine\"", 1);
        assert!(matches!(
            checkpoint_from_str(&corrupted, Path::new("t")),
            Err(Error::Parse { .. })
        ));
        let missing = text.replacen("\"epoch\": 4,", "", 1);
        assert!(checkpoint_from_str(&missing, Path::new("t")).is_err());
        let short = text.replacen("3.3333333333333331e-1,", "", 1);
        assert!(matches!(
            checkpoint_from_str(&short, Path::new("t")),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn layer_count_mismatch_names_the_layer() {
        let two = sample(2);
        let want = ModelConfig {
            layers: 3,
            dt: vec![0.042; 3],
            ..two.model.config.clone()
        };
        let err = two.check_against(&want).unwrap_err();
        assert!(err.to_string().contains("layer 3"), "{err}");
        two.check_against(&two.model.config).unwrap();
    }

    #[test]
    fn non_finite_parameters_are_not_saved() {
        let mut c = sample(1);
        c.model.layers[0].c[0] = f64::NAN;
        assert!(checkpoint_to_string(&c).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::model::ReadoutSite;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn parameters_survive_a_text_round_trip_bit_for_bit(
            values in prop::collection::vec(finite(), 64),
            seed in any::<u64>(),
            epoch in 0usize..10_000,
        ) {
            let cfg = ModelConfig::new(2, 3, 2, 2, 0.1, 1.0, ReadoutSite::Final);
            let mut model = Model::zeros(cfg).unwrap();
            let mut it = values.iter().cycle();
            for (_, t) in model.tensors_mut() {
                t.iter_mut().for_each(|v| *v = *it.next().unwrap());
            }
            let mut ckpt = Checkpoint::new(model);
            ckpt.seed = seed;
            ckpt.meta.epoch = epoch;
            let text = checkpoint_to_string(&ckpt).unwrap();
            let back = checkpoint_from_str(&text, Path::new("<memory>")).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.model.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits())).collect()
            };
            prop_assert_eq!(bits(&back), bits(&ckpt));
            prop_assert_eq!(back.seed, seed);
            prop_assert_eq!(back.meta.epoch, epoch);
        }
    }
}
