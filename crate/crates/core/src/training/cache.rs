use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::TrainingError;
use crate::model::ParserModel;

#[derive(Debug, Clone)]
pub struct CachedModel {
    pub model: ParserModel,
    pub losses: Vec<f64>,
}

/// Trained models keyed by everything that determines their weights.
/// Concurrent requests for one key train it once; the others wait.
#[derive(Debug, Default)]
pub struct ModelCache {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<CachedModel>>>>>,
}

impl ModelCache {
    pub fn get_or_train<F>(&self, key: &str, train: F) -> Result<CachedModel, TrainingError>
    where
        F: FnOnce() -> Result<CachedModel, TrainingError>,
    {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock");
            slots.entry(key.to_string()).or_default().clone()
        };
        let mut guard = slot.lock().expect("cache slot lock");
        if let Some(m) = guard.as_ref() {
            return Ok(m.clone());
        }
        let m = train()?;
        *guard = Some(m.clone());
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.slots
            .lock()
            .expect("cache lock")
            .values()
            .filter(|s| s.lock().expect("cache slot lock").is_some())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
