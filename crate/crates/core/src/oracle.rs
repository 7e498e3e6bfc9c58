//! Black-box simulation oracles mapping a parameter vector to a trace.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use crate::dynsim::{simulate, Scenario, SimError, Trace};
use crate::model::{OperatingPoint, SystemModel};
use crate::params::ParameterVector;

pub trait SimOracle: Sync {
    /// Noiseless output for parameters `p`; entries not listed keep their
    /// model values.
    fn evaluate(&self, p: &ParameterVector) -> Result<Trace, SimError>;
}

impl<F> SimOracle for F
where
    F: Fn(&ParameterVector) -> Result<Trace, SimError> + Sync,
{
    fn evaluate(&self, p: &ParameterVector) -> Result<Trace, SimError> {
        self(p)
    }
}

type Key = Vec<(String, u64)>;

fn key(p: &ParameterVector) -> Key {
    p.entries
        .iter()
        .map(|e| (e.path.clone(), e.value.to_bits()))
        .collect()
}

/// Simulator-backed oracle recording every channel of its scenario, with a
/// bounded first-in-first-out cache keyed by the exact parameter values.
pub struct PlantOracle {
    model: SystemModel,
    op: OperatingPoint,
    scenario: Scenario,
    fixed: ParameterVector,
    capacity: usize,
    cache: Mutex<VecDeque<(Key, Arc<Vec<Trace>>)>>,
}

impl PlantOracle {
    pub fn new(model: SystemModel, op: OperatingPoint, scenario: Scenario) -> Self {
        Self {
            model,
            op,
            scenario,
            fixed: ParameterVector::empty(),
            capacity: 64,
            cache: Mutex::new(VecDeque::new()),
        }
    }

    /// Overrides applied before every evaluation; entries in the evaluated
    /// vector take precedence.
    pub fn with_fixed(mut self, fixed: ParameterVector) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    /// All recorded channels at `p`.
    pub fn evaluate_all(&self, p: &ParameterVector) -> Result<Arc<Vec<Trace>>, SimError> {
        let k = key(p);
        if let Some(hit) = self
            .cache
            .lock()
            .expect("cache lock")
            .iter()
            .find(|(ck, _)| *ck == k)
        {
            return Ok(hit.1.clone());
        }
        let mut overrides = self.fixed.clone();
        overrides.entries.retain(|e| p.get(&e.path).is_none());
        overrides.entries.extend(p.entries.iter().cloned());
        let traces = Arc::new(simulate(&self.model, &self.op, &overrides, &self.scenario)?);
        if self.capacity > 0 {
            let mut cache = self.cache.lock().expect("cache lock");
            if !cache.iter().any(|(ck, _)| *ck == k) {
                if cache.len() >= self.capacity {
                    cache.pop_front();
                }
                cache.push_back((k, traces.clone()));
            }
        }
        Ok(traces)
    }

    /// Oracle view onto one recorded channel.
    pub fn channel(&self, index: usize) -> ChannelOracle<'_> {
        assert!(index < self.scenario.channels.len(), "channel index out of range");
        ChannelOracle { plant: self, index }
    }
}

pub struct ChannelOracle<'a> {
    plant: &'a PlantOracle,
    index: usize,
}

impl SimOracle for ChannelOracle<'_> {
    fn evaluate(&self, p: &ParameterVector) -> Result<Trace, SimError> {
        Ok(self.plant.evaluate_all(p)?[self.index].clone())
    }
}
