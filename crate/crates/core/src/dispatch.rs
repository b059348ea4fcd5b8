//! The runtime path: identify the user, classify the intent, and resolve a
//! preference-conditioned action.
//!
//! The action registry maps each imagery label to an action template with
//! default parameters; the preference store maps subjects to key/value
//! overrides. Dispatch runs both models on the same epoch, abstains when
//! either confidence falls below the threshold, and otherwise resolves
//! `registry[intent]` with the subject's matching preference keys — so the
//! action name depends on the intent alone and preferences only adjust its
//! parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use pbci_nn::Scalar;

use crate::data::{DataError, Epoch, ImageryLabel, SubjectId};
use crate::decoder::{DecoderError, ShallowConvNet, TaskKind};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("model has task {actual:?}, expected {expected:?}")]
    WrongTask { expected: TaskKind, actual: TaskKind },
    #[error("registry is missing an action for label '{0}'")]
    IncompleteRegistry(ImageryLabel),
    #[error("store line {line}: {reason}")]
    StoreParse { line: usize, reason: String },
    #[error("registry line {line}: {reason}")]
    RegistryParse { line: usize, reason: String },
    #[error("confidence threshold {0} must be in [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DispatchError + '_ {
    move |source| DispatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Identification result: the winning subject and the full distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPrediction {
    pub subject: SubjectId,
    pub confidence: f64,
    pub distribution: Vec<f64>,
}

/// Intention result: the winning label and the full distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentPrediction {
    pub intent: ImageryLabel,
    pub confidence: f64,
    pub distribution: Vec<f64>,
}

/// Per-subject key/value preferences, persisted as tab-separated
/// `subject key value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceStore {
    prefs: BTreeMap<u8, BTreeMap<String, String>>,
}

impl PreferenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, subject: SubjectId, key: impl Into<String>, value: impl Into<String>) {
        self.prefs
            .entry(subject.index())
            .or_default()
            .insert(key.into(), value.into());
    }

    pub fn get(&self, subject: SubjectId) -> Option<&BTreeMap<String, String>> {
        self.prefs.get(&subject.index())
    }

    pub fn save(&self, path: &Path) -> Result<(), DispatchError> {
        let mut out = String::from("# subject\tkey\tvalue\n");
        for (subject, entries) in &self.prefs {
            for (key, value) in entries {
                out.push_str(&format!("{subject}\t{key}\t{value}\n"));
            }
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DispatchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut store = PreferenceStore::new();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(DispatchError::StoreParse {
                    line: idx + 1,
                    reason: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let subject = fields[0]
                .parse::<u8>()
                .ok()
                .and_then(|s| SubjectId::new(s).ok())
                .ok_or_else(|| DispatchError::StoreParse {
                    line: idx + 1,
                    reason: format!("bad subject '{}'", fields[0]),
                })?;
            store.set(subject, fields[1], fields[2]);
        }
        Ok(store)
    }
}

/// An action with ordered parameter defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTemplate {
    pub action_name: String,
    pub defaults: Vec<(String, String)>,
}

/// Total map from imagery label to action template, persisted as
/// tab-separated `label action key=value ...` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiRegistry {
    actions: BTreeMap<ImageryLabel, ActionTemplate>,
}

impl ApiRegistry {
    /// Build from one template per label; fails unless all four labels are
    /// covered.
    pub fn new(entries: Vec<(ImageryLabel, ActionTemplate)>) -> Result<Self, DispatchError> {
        let actions: BTreeMap<ImageryLabel, ActionTemplate> = entries.into_iter().collect();
        for label in ImageryLabel::ALL {
            if !actions.contains_key(&label) {
                return Err(DispatchError::IncompleteRegistry(label));
            }
        }
        Ok(ApiRegistry { actions })
    }

    pub fn get(&self, label: ImageryLabel) -> &ActionTemplate {
        &self.actions[&label]
    }

    /// A small demonstration registry covering all four intents.
    pub fn demo() -> Self {
        let template = |name: &str, defaults: &[(&str, &str)]| ActionTemplate {
            action_name: name.to_string(),
            defaults: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        ApiRegistry::new(vec![
            (
                ImageryLabel::Apple,
                template("order_fruit", &[("item", "apple"), ("delivery", "morning")]),
            ),
            (
                ImageryLabel::Star,
                template("set_lighting", &[("scene", "night"), ("level", "40")]),
            ),
            (
                ImageryLabel::Clover,
                template("play_media", &[("channel", "news"), ("volume", "30")]),
            ),
            (
                ImageryLabel::Snowman,
                template("set_climate", &[("target_c", "21"), ("mode", "heat")]),
            ),
        ])
        .expect("demo registry covers all labels")
    }

    pub fn save(&self, path: &Path) -> Result<(), DispatchError> {
        let mut out = String::from("# label\taction\tkey=value...\n");
        for (label, template) in &self.actions {
            out.push_str(&format!("{}\t{}", label.name(), template.action_name));
            for (k, v) in &template.defaults {
                out.push_str(&format!("\t{k}={v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DispatchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split('\t');
            let parse_err = |reason: String| DispatchError::RegistryParse {
                line: idx + 1,
                reason,
            };
            let label_str = fields.next().unwrap_or_default();
            let label = ImageryLabel::parse(label_str)
                .ok_or_else(|| parse_err(format!("bad label '{label_str}'")))?;
            let action_name = fields
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err("missing action name".into()))?
                .to_string();
            let mut defaults = Vec::new();
            for pair in fields {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| parse_err(format!("bad parameter '{pair}'")))?;
                defaults.push((k.to_string(), v.to_string()));
            }
            entries.push((label, ActionTemplate {
                action_name,
                defaults,
            }));
        }
        ApiRegistry::new(entries)
    }
}

/// The resolved end-to-end result for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedAction {
    pub subject: SubjectId,
    pub subject_confidence: f64,
    pub intent: ImageryLabel,
    pub intent_confidence: f64,
    pub abstained: bool,
    /// `None` exactly when `abstained`.
    pub action_name: Option<String>,
    pub parameters: BTreeMap<String, String>,
}

impl PersonalizedAction {
    /// `key=value` line rendering for logs and the CLI.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("subject={}\n", self.subject.index()));
        out.push_str(&format!(
            "subject_confidence={:.4}\n",
            self.subject_confidence
        ));
        out.push_str(&format!("intent={}\n", self.intent.name()));
        out.push_str(&format!("intent_confidence={:.4}\n", self.intent_confidence));
        out.push_str(&format!("abstained={}\n", self.abstained));
        if let Some(name) = &self.action_name {
            out.push_str(&format!("action={name}\n"));
            for (k, v) in &self.parameters {
                out.push_str(&format!("param.{k}={v}\n"));
            }
        }
        out
    }
}

impl fmt::Display for PersonalizedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn check_task<T: Scalar>(
    model: &ShallowConvNet<T>,
    expected: TaskKind,
) -> Result<(), DispatchError> {
    if model.task != expected {
        return Err(DispatchError::WrongTask {
            expected,
            actual: model.task,
        });
    }
    Ok(())
}

/// Run the identification model on an epoch.
pub fn identify_user<T: Scalar>(
    model_f: &ShallowConvNet<T>,
    epoch: &Epoch,
) -> Result<SubjectPrediction, DispatchError> {
    check_task(model_f, TaskKind::Identification)?;
    let (index, distribution) = model_f.predict(epoch)?;
    let distribution: Vec<f64> = distribution.iter().map(|&v| v.to_f64()).collect();
    Ok(SubjectPrediction {
        subject: SubjectId::new(index as u8 + 1).expect("class index + 1 is nonzero"),
        confidence: distribution[index],
        distribution,
    })
}

/// Run the intention model on an epoch.
pub fn classify_intent<T: Scalar>(
    model_g: &ShallowConvNet<T>,
    epoch: &Epoch,
) -> Result<IntentPrediction, DispatchError> {
    check_task(model_g, TaskKind::Intention)?;
    let (index, distribution) = model_g.predict(epoch)?;
    let distribution: Vec<f64> = distribution.iter().map(|&v| v.to_f64()).collect();
    Ok(IntentPrediction {
        intent: ImageryLabel::from_ordinal(index as u8).map_err(DataError::from)?,
        confidence: distribution[index],
        distribution,
    })
}

/// Full pipeline over one epoch: identify, classify, then either abstain
/// (when the weaker of the two confidences is below `tau`) or resolve the
/// intent's action template with the subject's preference overrides.
pub fn dispatch<T: Scalar>(
    model_f: &ShallowConvNet<T>,
    model_g: &ShallowConvNet<T>,
    store: &PreferenceStore,
    registry: &ApiRegistry,
    epoch: &Epoch,
    tau: f64,
) -> Result<PersonalizedAction, DispatchError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(DispatchError::BadThreshold(tau));
    }
    let who = identify_user(model_f, epoch)?;
    let what = classify_intent(model_g, epoch)?;

    if who.confidence.min(what.confidence) < tau {
        return Ok(PersonalizedAction {
            subject: who.subject,
            subject_confidence: who.confidence,
            intent: what.intent,
            intent_confidence: what.confidence,
            abstained: true,
            action_name: None,
            parameters: BTreeMap::new(),
        });
    }

    let template = registry.get(what.intent);
    let mut parameters: BTreeMap<String, String> = template.defaults.iter().cloned().collect();
    if let Some(prefs) = store.get(who.subject) {
        for (key, value) in prefs {
            // preferences override only the template's own parameter slots
            if let Some(slot) = parameters.get_mut(key) {
                *slot = value.clone();
            }
        }
    }
    Ok(PersonalizedAction {
        subject: who.subject,
        subject_confidence: who.confidence,
        intent: what.intent,
        intent_confidence: what.confidence,
        abstained: false,
        action_name: Some(template.action_name.clone()),
        parameters,
    })
}
