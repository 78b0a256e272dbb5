//! Per-agent real-time inference with instant model switching at cell
//! transitions.

use std::collections::BTreeMap;

use crate::domain::{AgentId, CellId, LabelGrid, Sample, Timestamp};
use crate::error::Result;
use crate::learner::ModelSnapshot;

/// Immutable per-tick view of the broadcast models. Cells that never
/// broadcast fall back to their pretrained initialization.
pub struct CellModelView<'a> {
    pub current: &'a BTreeMap<CellId, ModelSnapshot>,
    pub pretrained: &'a BTreeMap<CellId, ModelSnapshot>,
}

impl<'a> CellModelView<'a> {
    pub fn get(&self, cell: CellId) -> Option<&'a ModelSnapshot> {
        self.current.get(&cell).or_else(|| self.pretrained.get(&cell))
    }
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub agent: AgentId,
    pub current_cell: Option<CellId>,
    pub model_version: u64,
    pub last_prediction_at: Timestamp,
}

impl AgentState {
    pub fn new(agent: AgentId) -> Self {
        Self {
            agent,
            current_cell: None,
            model_version: 0,
            last_prediction_at: Timestamp(0.0),
        }
    }

    /// Switch to the cell's model if the assignment changed (switch precedes
    /// inference at the same tick), then predict. Returns the prediction and
    /// whether a cell transition happened.
    pub fn tick(
        &mut self,
        sample: &Sample,
        cell: CellId,
        models: &CellModelView<'_>,
    ) -> Result<(LabelGrid, Option<CellId>)> {
        let switched_from = match self.current_cell {
            Some(prev) if prev != cell => Some(prev),
            _ => None,
        };
        self.current_cell = Some(cell);
        let model = models
            .get(cell)
            .ok_or_else(|| crate::error::Error::contract(format!("no model for cell {cell}")))?;
        self.model_version = model.version;
        self.last_prediction_at = sample.time;
        let prediction = model.predict(sample)?;
        Ok((prediction, switched_from))
    }
}
