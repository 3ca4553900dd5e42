use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Agent-space action as the critic consumes it.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO store with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    dims: Option<(usize, usize)>,
    rng: ChaCha8Rng,
}

/// Column-stacked view of a sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<f64>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            dims: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let dims = (t.state.len(), t.action.len());
        if t.next_state.len() != dims.0 {
            return Err(Error::Usage(format!(
                "next state has {} entries, state has {}",
                t.next_state.len(),
                dims.0
            )));
        }
        match self.dims {
            Some(d) if d != dims => {
                return Err(Error::Usage(format!(
                    "transition shape (state {}, action {}) differs from buffer (state {}, action {})",
                    dims.0, dims.1, d.0, d.1
                )))
            }
            None => self.dims = Some(dims),
            _ => {}
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Indices of a uniform with-replacement sample, drawn from the buffer's
    /// own stream.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        let size = self.items.len();
        if n > size || size == 0 {
            return Err(Error::InsufficientData {
                requested: n,
                available: size,
            });
        }
        Ok((0..n).map(|_| self.rng.random_range(0..size)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Batch> {
        let idx = self.sample_indices(n)?;
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (sd, ad) = self.dims.unwrap_or((0, 0));
        let mut b = Batch {
            len: idx.len(),
            states: Vec::with_capacity(idx.len() * sd),
            actions: Vec::with_capacity(idx.len() * ad),
            rewards: Vec::with_capacity(idx.len()),
            next_states: Vec::with_capacity(idx.len() * sd),
            dones: Vec::with_capacity(idx.len()),
            state_dim: sd,
            action_dim: ad,
        };
        for &i in idx {
            let t = &self.items[i];
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.next_states.extend_from_slice(&t.next_state);
            b.dones.push(if t.done { 1.0 } else { 0.0 });
        }
        b
    }
}

/// One-off sample with an explicit seed, leaving the buffer's stream alone.
pub fn buffer_sample(buffer: &ReplayBuffer, n: usize, seed: u64) -> Result<Batch> {
    let size = buffer.len();
    if n > size || size == 0 {
        return Err(Error::InsufficientData {
            requested: n,
            available: size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
    Ok(buffer.gather(&idx))
}
