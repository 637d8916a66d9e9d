//! Meta-learning tasks: context and target sets per output channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Context and target observations of one output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelData<F> {
    pub xc: Vec<F>,
    pub yc: Vec<F>,
    pub xt: Vec<F>,
    pub yt: Vec<F>,
}

impl<F: Scalar> ChannelData<F> {
    pub fn validate(&self) -> Result<()> {
        if self.xc.len() != self.yc.len() || self.xt.len() != self.yt.len() {
            return Err(Error::shape(
                "task",
                format!("context {}/{}, target {}/{}", self.xc.len(), self.yc.len(), self.xt.len(), self.yt.len()),
            ));
        }
        if self.xc.iter().chain(&self.yc).chain(&self.xt).chain(&self.yt).any(|v| !v.is_finite()) {
            return Err(Error::domain("task", "non-finite observation"));
        }
        Ok(())
    }
}

/// How a task was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskMeta {
    pub family: String,
    pub seed: u64,
    pub hyper: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task<F> {
    pub channels: Vec<ChannelData<F>>,
    pub meta: TaskMeta,
}

impl<F: Scalar> Task<F> {
    /// Single-channel task.
    pub fn single(xc: Vec<F>, yc: Vec<F>, xt: Vec<F>, yt: Vec<F>) -> Self {
        Self { channels: vec![ChannelData { xc, yc, xt, yt }], meta: TaskMeta::default() }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Context size of the first channel.
    pub fn num_context(&self) -> usize {
        self.channels.first().map_or(0, |c| c.xc.len())
    }

    pub fn num_targets(&self) -> usize {
        self.channels.iter().map(|c| c.xt.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("task has no channels"));
        }
        self.channels.iter().try_for_each(ChannelData::validate)
    }

    /// The same task with every input shifted by `c`.
    pub fn translated(&self, c: F) -> Self {
        let mut out = self.clone();
        for ch in &mut out.channels {
            ch.xc.iter_mut().chain(ch.xt.iter_mut()).for_each(|x| *x += c);
        }
        out
    }

    /// Every context and target input across channels.
    pub fn all_inputs(&self) -> Vec<F> {
        self.channels.iter().flat_map(|c| c.xc.iter().chain(&c.xt).copied()).collect()
    }
}
