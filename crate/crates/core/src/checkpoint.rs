//! Helpers shared by every model checkpoint.

use std::path::Path;

use histosynth_tensor::{Adam, Container, ParamStore, RngState, Scalar, SeededRng, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn params_with_prefix<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
    store
        .iter()
        .map(|(name, t)| (format!("{prefix}{name}"), t.clone()))
        .collect()
}

pub(crate) fn load_params<T: Scalar>(store: &mut ParamStore<T>, c: &Container<T>, prefix: &str) -> Result<()> {
    store.load_named(|name| c.get(&format!("{prefix}{name}")))?;
    Ok(())
}

pub(crate) fn save_adam<T: Scalar>(c: &mut Container<T>, opt: &Adam<T>, store: &ParamStore<T>, prefix: &str) {
    c.extend(opt.state_tensors(store, prefix));
}

pub(crate) fn load_adam<T: Scalar>(
    c: &Container<T>,
    store: &ParamStore<T>,
    config: histosynth_tensor::AdamConfig,
    step: u64,
    prefix: &str,
) -> Result<Adam<T>> {
    Ok(Adam::restore(store, config, step, prefix, |name| c.get(name))?)
}

pub(crate) fn meta<D: DeserializeOwned>(c: &Container<impl Scalar>, key: &str) -> Result<D> {
    let value = c
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks `{key}`", c.kind)))?;
    Ok(serde_json::from_value(value.clone())?)
}

pub(crate) fn to_json(value: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

pub(crate) fn expect_kind<T: Scalar>(c: &Container<T>, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", c.kind)));
    }
    Ok(())
}

pub(crate) fn rng_meta(rng: &SeededRng) -> Result<serde_json::Value> {
    to_json(&RngState::capture(rng))
}

pub(crate) fn rng_from_meta<T: Scalar>(c: &Container<T>, key: &str) -> Result<SeededRng> {
    let state: RngState = meta(c, key)?;
    Ok(state.restore()?)
}

pub(crate) fn load_container<T: Scalar>(path: &Path, kind: &str) -> Result<Container<T>> {
    let c = Container::load(path)?;
    expect_kind(&c, kind)?;
    Ok(c)
}
