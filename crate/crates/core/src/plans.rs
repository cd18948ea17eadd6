//! JSON plans files: named configurations with single-parent inheritance.
//!
//! A configuration stores only the keys it overrides. Resolution walks the
//! `inherits_from` chain root-first, deep-merges the overrides (objects merge
//! key by key, everything else replaces), fills omitted fields from defaults
//! and the topology planner, and validates the result.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::topology::{
    default_encoder_blocks, derive_features, plan_topology, EncoderType, TopologyDescriptor, DECODER_CONVS_PER_STAGE,
    DEFAULT_FEATURES_BASE, DEFAULT_FEATURES_CAP, DEFAULT_KERNEL,
};

/// Foreground vs background.
pub const NUM_CLASSES: usize = 2;
pub const SUPPORTED_SCHEMES: &[&str] = &["CT"];
const INHERITS_FROM: &str = "inherits_from";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlansError {
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("configuration `{config}` inherits from unknown configuration `{parent}`")]
    MissingParent { config: String, parent: String },
    #[error("inheritance cycle: {}", .chain.join(" -> "))]
    Cycle { chain: Vec<String> },
    #[error("no configuration named `{0}`")]
    UnknownConfiguration(String),
    #[error("configuration `{configuration}`: field `{field}` {invariant}")]
    Validation {
        configuration: String,
        field: String,
        invariant: String,
    },
}

impl PlansError {
    fn from_json(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => PlansError::Schema(e.to_string()),
            _ => PlansError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfiguration {
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub spacing: [f64; 3],
    pub normalization_schemes: Vec<String>,
    pub encoder_type: EncoderType,
    pub features_base: usize,
    pub features_cap: usize,
    pub blocks_per_stage_encoder: Vec<usize>,
    pub convs_per_stage_decoder: Vec<usize>,
    pub kernel_sizes: Vec<[usize; 3]>,
    pub strides_per_stage: Vec<[usize; 3]>,
    pub deep_supervision: bool,
    pub oversample_foreground_fraction: f64,
    pub num_epochs: usize,
    pub num_iterations_per_epoch: usize,
    pub initial_learning_rate: f64,
    pub inference_step_fraction: f64,
    pub mirror_axes: Vec<usize>,
}

/// Every overridable key, in declaration order.
pub const CONFIG_FIELDS: &[&str] = &[
    "batch_size",
    "patch_size",
    "spacing",
    "normalization_schemes",
    "encoder_type",
    "features_base",
    "features_cap",
    "blocks_per_stage_encoder",
    "convs_per_stage_decoder",
    "kernel_sizes",
    "strides_per_stage",
    "deep_supervision",
    "oversample_foreground_fraction",
    "num_epochs",
    "num_iterations_per_epoch",
    "initial_learning_rate",
    "inference_step_fraction",
    "mirror_axes",
];

/// Same schema as [`ResolvedConfiguration`] with every field optional; used
/// to type-check sparse overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfiguration {
    batch_size: Option<usize>,
    patch_size: Option<[usize; 3]>,
    spacing: Option<[f64; 3]>,
    normalization_schemes: Option<Vec<String>>,
    encoder_type: Option<EncoderType>,
    features_base: Option<usize>,
    features_cap: Option<usize>,
    blocks_per_stage_encoder: Option<Vec<usize>>,
    convs_per_stage_decoder: Option<Vec<usize>>,
    kernel_sizes: Option<Vec<[usize; 3]>>,
    strides_per_stage: Option<Vec<[usize; 3]>>,
    deep_supervision: Option<bool>,
    oversample_foreground_fraction: Option<f64>,
    num_epochs: Option<usize>,
    num_iterations_per_epoch: Option<usize>,
    initial_learning_rate: Option<f64>,
    inference_step_fraction: Option<f64>,
    mirror_axes: Option<Vec<usize>>,
}

/// Checks one override against the schema; the error names the key.
fn check_override(key: &str, value: &Value) -> Result<(), String> {
    if !CONFIG_FIELDS.contains(&key) {
        return Err(format!("unknown key `{key}`"));
    }
    let mut single = Map::new();
    single.insert(key.to_string(), value.clone());
    serde_json::from_value::<PartialConfiguration>(Value::Object(single))
        .map(|_| ())
        .map_err(|e| format!("key `{key}`: {e}"))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfiguration {
    pub inherits_from: Option<String>,
    pub overrides: Map<String, Value>,
}

impl RawConfiguration {
    pub fn new(inherits_from: Option<&str>) -> Self {
        Self {
            inherits_from: inherits_from.map(str::to_string),
            overrides: Map::new(),
        }
    }

    /// Sets an override after checking it against the schema.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), PlansError> {
        check_override(key, &value).map_err(PlansError::Schema)?;
        self.overrides.insert(key.to_string(), value);
        Ok(())
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.set(key, value).expect("valid override");
        self
    }
}

impl Serialize for RawConfiguration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let n = self.overrides.len() + usize::from(self.inherits_from.is_some());
        let mut map = serializer.serialize_map(Some(n))?;
        if let Some(parent) = &self.inherits_from {
            map.serialize_entry(INHERITS_FROM, parent)?;
        }
        for (k, v) in &self.overrides {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Map visitor that rejects repeated keys (serde_json keeps the last one silently).
struct UniqueKeys<V>(&'static str, std::marker::PhantomData<V>);

impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueKeys<V> {
    type Value = BTreeMap<String, V>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "an object of {}", self.0)
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
        let mut out = BTreeMap::new();
        while let Some(key) = access.next_key::<String>()? {
            if out.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate {} `{key}`", self.0)));
            }
            let value = access.next_value()?;
            out.insert(key, value);
        }
        Ok(out)
    }
}

impl<'de> Deserialize<'de> for RawConfiguration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let entries: BTreeMap<String, Value> =
            deserializer.deserialize_map(UniqueKeys("configuration key", std::marker::PhantomData))?;
        let mut raw = RawConfiguration::default();
        for (key, value) in entries {
            if key == INHERITS_FROM {
                raw.inherits_from = match value {
                    Value::Null => None,
                    Value::String(s) => Some(s),
                    other => {
                        return Err(de::Error::custom(format!(
                            "`{INHERITS_FROM}` must be a string, got {other}"
                        )))
                    }
                };
                continue;
            }
            check_override(&key, &value).map_err(de::Error::custom)?;
            raw.overrides.insert(key, value);
        }
        Ok(raw)
    }
}

fn unique_configurations<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> Result<BTreeMap<String, RawConfiguration>, D::Error> {
    let map = deserializer.deserialize_map(UniqueKeys::<RawConfiguration>(
        "configuration name",
        std::marker::PhantomData,
    ))?;
    if map.contains_key("") {
        return Err(de::Error::custom("configuration names must be non-empty"));
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub plans_name: String,
    #[serde(deserialize_with = "unique_configurations")]
    pub configurations: BTreeMap<String, RawConfiguration>,
}

impl PlanFile {
    pub fn new(plans_name: &str) -> Self {
        Self {
            plans_name: plans_name.to_string(),
            configurations: BTreeMap::new(),
        }
    }

    /// Missing parents and cycles, checked in name order.
    pub fn check_graph(&self) -> Result<(), PlansError> {
        for name in self.configurations.keys() {
            self.chain(name)?;
        }
        Ok(())
    }

    /// Inheritance chain starting at `name`, child first.
    pub fn chain(&self, name: &str) -> Result<Vec<&str>, PlansError> {
        let (mut current, _) = self
            .configurations
            .get_key_value(name)
            .ok_or_else(|| PlansError::UnknownConfiguration(name.to_string()))?;
        let mut chain: Vec<&str> = vec![current.as_str()];
        while let Some(parent) = &self.configurations[current].inherits_from {
            let (key, _) = self
                .configurations
                .get_key_value(parent)
                .ok_or_else(|| PlansError::MissingParent {
                    config: current.clone(),
                    parent: parent.clone(),
                })?;
            if let Some(pos) = chain.iter().position(|c| *c == key) {
                let mut cycle: Vec<String> = chain[pos..].iter().map(|s| s.to_string()).collect();
                cycle.push(key.clone());
                return Err(PlansError::Cycle { chain: cycle });
            }
            chain.push(key);
            current = key;
        }
        Ok(chain)
    }
}

/// Parses a plans document. Inheritance references are checked (unknown
/// parents and cycles are errors) but nothing is resolved.
pub fn parse_plans(text: &str) -> Result<PlanFile, PlansError> {
    let plan: PlanFile = serde_json::from_str(text).map_err(PlansError::from_json)?;
    plan.check_graph()?;
    Ok(plan)
}

/// Pretty JSON with sorted keys (`inherits_from` first within a configuration).
pub fn serialize_plans(plan: &PlanFile) -> String {
    let mut s = serde_json::to_string_pretty(plan).expect("plans serialize to JSON");
    s.push('\n');
    s
}

/// Objects merge key by key; any other value replaces.
pub fn deep_merge(base: &mut Map<String, Value>, overrides: &Map<String, Value>) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => deep_merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn resolve_configuration(plan: &PlanFile, name: &str) -> Result<ResolvedConfiguration, PlansError> {
    let chain = plan.chain(name)?;
    let mut merged = Map::new();
    for cfg in chain.iter().rev() {
        deep_merge(&mut merged, &plan.configurations[*cfg].overrides);
    }
    let invalid = |field: &str, invariant: String| PlansError::Validation {
        configuration: name.to_string(),
        field: field.to_string(),
        invariant,
    };
    for (k, v) in &merged {
        check_override(k, v).map_err(|e| invalid(k, e))?;
    }
    let p: PartialConfiguration = serde_json::from_value(Value::Object(merged)).map_err(PlansError::from_json)?;
    let resolved = fill_defaults(p).map_err(|(field, msg)| invalid(field, msg))?;
    resolved.validate().map_err(|(field, msg)| invalid(field, msg))?;
    Ok(resolved)
}

fn fill_defaults(p: PartialConfiguration) -> Result<ResolvedConfiguration, (&'static str, String)> {
    let patch_size = p.patch_size.ok_or(("patch_size", "is required".to_string()))?;
    let spacing = p.spacing.unwrap_or([1.0; 3]);
    let encoder_type = p.encoder_type.unwrap_or(EncoderType::Plain);
    let normalization_schemes = p
        .normalization_schemes
        .unwrap_or_else(|| vec!["CT".into(), "CT".into()]);
    let strides_per_stage = match p.strides_per_stage {
        Some(s) => s,
        None => {
            plan_topology(
                patch_size,
                spacing,
                encoder_type,
                normalization_schemes.len().max(1),
                NUM_CLASSES,
            )
            .map_err(|e| ("patch_size", format!("cannot be planned: {e}")))?
            .strides_per_stage
        }
    };
    let n = strides_per_stage.len();
    Ok(ResolvedConfiguration {
        batch_size: p.batch_size.unwrap_or(2),
        patch_size,
        spacing,
        encoder_type,
        features_base: p.features_base.unwrap_or(DEFAULT_FEATURES_BASE),
        features_cap: p.features_cap.unwrap_or(DEFAULT_FEATURES_CAP),
        blocks_per_stage_encoder: p
            .blocks_per_stage_encoder
            .unwrap_or_else(|| default_encoder_blocks(encoder_type, n)),
        convs_per_stage_decoder: p
            .convs_per_stage_decoder
            .unwrap_or_else(|| vec![DECODER_CONVS_PER_STAGE; n.saturating_sub(1)]),
        kernel_sizes: p.kernel_sizes.unwrap_or_else(|| vec![DEFAULT_KERNEL; n]),
        strides_per_stage,
        normalization_schemes,
        deep_supervision: p.deep_supervision.unwrap_or(true),
        oversample_foreground_fraction: p.oversample_foreground_fraction.unwrap_or(0.33),
        num_epochs: p.num_epochs.unwrap_or(25),
        num_iterations_per_epoch: p.num_iterations_per_epoch.unwrap_or(50),
        initial_learning_rate: p.initial_learning_rate.unwrap_or(0.01),
        inference_step_fraction: p.inference_step_fraction.unwrap_or(0.5),
        mirror_axes: p.mirror_axes.unwrap_or_else(|| vec![0, 1, 2]),
    })
}

impl ResolvedConfiguration {
    pub fn num_stages(&self) -> usize {
        self.strides_per_stage.len()
    }

    pub fn num_input_channels(&self) -> usize {
        self.normalization_schemes.len()
    }

    /// Returns `(field, violated invariant)` on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let n = self.num_stages();
        let err = |f: &'static str, m: &str| Err((f, m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.patch_size.contains(&0) {
            return err("patch_size", "entries must be positive");
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return err("spacing", "entries must be positive and finite");
        }
        if self.normalization_schemes.is_empty() {
            return err("normalization_schemes", "needs one scheme per input channel");
        }
        if let Some(s) = self
            .normalization_schemes
            .iter()
            .find(|s| !SUPPORTED_SCHEMES.contains(&s.as_str()))
        {
            return Err((
                "normalization_schemes",
                format!("contains unsupported scheme `{s}` (supported: CT)"),
            ));
        }
        if self.features_base == 0 || self.features_cap == 0 {
            return err("features_base", "features_base and features_cap must be positive");
        }
        if self.features_cap < self.features_base {
            return err("features_cap", "must be >= features_base");
        }
        if n < 2 {
            return err("strides_per_stage", "needs at least 2 stages");
        }
        if self.kernel_sizes.len() != n {
            return err("kernel_sizes", "len(kernel_sizes) must equal len(strides_per_stage)");
        }
        if self.strides_per_stage[0] != [1, 1, 1] {
            return err("strides_per_stage", "first stage stride must be [1, 1, 1]");
        }
        if self.strides_per_stage.iter().flatten().any(|&s| s == 0) {
            return err("strides_per_stage", "entries must be positive");
        }
        if self.kernel_sizes.iter().flatten().any(|&k| k % 2 == 0) {
            return err("kernel_sizes", "entries must be odd");
        }
        let total = self.total_stride();
        for a in 0..3 {
            if !self.patch_size[a].is_multiple_of(total[a]) {
                return Err((
                    "patch_size",
                    format!(
                        "axis {a} ({}) must be divisible by the product of strides ({})",
                        self.patch_size[a], total[a]
                    ),
                ));
            }
        }
        if self.blocks_per_stage_encoder.len() != n || self.blocks_per_stage_encoder.contains(&0) {
            return err("blocks_per_stage_encoder", "needs one positive entry per stage");
        }
        if self.convs_per_stage_decoder.len() != n - 1 || self.convs_per_stage_decoder.contains(&0) {
            return err(
                "convs_per_stage_decoder",
                "needs one positive entry per decoder stage (stages - 1)",
            );
        }
        if !(0.0..=1.0).contains(&self.oversample_foreground_fraction) {
            return err("oversample_foreground_fraction", "must lie in [0, 1]");
        }
        if self.num_epochs == 0 {
            return err("num_epochs", "must be positive");
        }
        if self.num_iterations_per_epoch == 0 {
            return err("num_iterations_per_epoch", "must be positive");
        }
        if !(self.initial_learning_rate.is_finite() && self.initial_learning_rate > 0.0) {
            return err("initial_learning_rate", "must be positive and finite");
        }
        if !(self.inference_step_fraction > 0.0 && self.inference_step_fraction <= 1.0) {
            return err("inference_step_fraction", "must lie in (0, 1]");
        }
        let mut seen = [false; 3];
        for &a in &self.mirror_axes {
            if a > 2 || seen[a] {
                return err("mirror_axes", "must be a subset of {0, 1, 2} without repeats");
            }
            seen[a] = true;
        }
        Ok(())
    }

    pub fn total_stride(&self) -> [usize; 3] {
        let mut t = [1; 3];
        for s in &self.strides_per_stage {
            for a in 0..3 {
                t[a] *= s[a];
            }
        }
        t
    }

    pub fn features_per_stage(&self) -> Vec<usize> {
        derive_features(self.features_base, self.features_cap, self.num_stages())
    }

    pub fn topology(&self) -> TopologyDescriptor {
        TopologyDescriptor {
            num_stages: self.num_stages(),
            features_per_stage: self.features_per_stage(),
            strides_per_stage: self.strides_per_stage.clone(),
            kernel_sizes: self.kernel_sizes.clone(),
            encoder_type: self.encoder_type,
            blocks_per_stage_encoder: self.blocks_per_stage_encoder.clone(),
            convs_per_stage_decoder: self.convs_per_stage_decoder.clone(),
            deep_supervision: self.deep_supervision,
            num_input_channels: self.num_input_channels(),
            num_classes: NUM_CLASSES,
        }
    }

    /// Foreground-forced samples per batch.
    pub fn foreground_samples_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.oversample_foreground_fraction).round() as usize
    }

    /// Every field as an explicit override, so resolving it is the identity.
    pub fn to_raw(&self) -> RawConfiguration {
        let Value::Object(overrides) = serde_json::to_value(self).expect("serializable") else {
            unreachable!("struct serializes to an object")
        };
        RawConfiguration {
            inherits_from: None,
            overrides,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldDiff {
    pub field: String,
    pub a: Value,
    pub b: Value,
}

/// Fields whose resolved values differ, in schema order.
pub fn diff_configurations(a: &ResolvedConfiguration, b: &ResolvedConfiguration) -> Vec<FieldDiff> {
    let (va, vb) = (a.to_raw().overrides, b.to_raw().overrides);
    CONFIG_FIELDS
        .iter()
        .filter(|f| va[**f] != vb[**f])
        .map(|f| FieldDiff {
            field: f.to_string(),
            a: va[*f].clone(),
            b: vb[*f].clone(),
        })
        .collect()
}
