//! Fixed-capacity ring buffer of transitions with uniform sampling.

use ndarray::Array2;
use rand::Rng;

use crate::env::normalize_vaoi;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<u32>,
    pub action: usize,
    pub next_state: Vec<u32>,
    /// Shaped reward frozen at collection time.
    pub reward: f64,
    /// VAoI part of the reward, kept so rewards can be reshaped later.
    pub penalty: f64,
    pub cost: u8,
}

/// Minibatch with states already scaled to network features.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub next_states: Array2<f64>,
    pub rewards: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    n_users: usize,
    states: Vec<u32>,
    next_states: Vec<u32>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    penalties: Vec<f64>,
    costs: Vec<u8>,
    head: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_users: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(config_err("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            n_users,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            penalties: Vec::new(),
            costs: Vec::new(),
            head: 0,
            pushed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions pushed over the buffer's lifetime.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert_eq!(t.state.len(), self.n_users);
        let n = self.n_users;
        if self.len() < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.next_states.extend_from_slice(&t.next_state);
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.penalties.push(t.penalty);
            self.costs.push(t.cost);
        } else {
            let i = self.head;
            self.states[i * n..(i + 1) * n].copy_from_slice(&t.state);
            self.next_states[i * n..(i + 1) * n].copy_from_slice(&t.next_state);
            self.actions[i] = t.action;
            self.rewards[i] = t.reward;
            self.penalties[i] = t.penalty;
            self.costs[i] = t.cost;
        }
        self.head = (self.head + 1) % self.capacity;
        self.pushed += 1;
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        let len = self.len();
        let start = if len < self.capacity { 0 } else { self.head };
        (0..len).map(move |i| self.get((start + i) % len))
    }

    fn get(&self, i: usize) -> Transition {
        let n = self.n_users;
        Transition {
            state: self.states[i * n..(i + 1) * n].to_vec(),
            action: self.actions[i],
            next_state: self.next_states[i * n..(i + 1) * n].to_vec(),
            reward: self.rewards[i],
            penalty: self.penalties[i],
            cost: self.costs[i],
        }
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample_transitions<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| self.get(i)).collect())
    }

    /// Sample a feature batch. With `reshape_lambda` set, rewards are rebuilt
    /// from the stored penalty and cost using that multiplier.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        d_max: u32,
        reshape_lambda: Option<f64>,
        rng: &mut R,
    ) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        let n = self.n_users;
        let mut states = Array2::zeros((batch, n));
        let mut next_states = Array2::zeros((batch, n));
        let mut actions = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for (row, &i) in idx.iter().enumerate() {
            let s = normalize_vaoi(&self.states[i * n..(i + 1) * n], d_max);
            let s2 = normalize_vaoi(&self.next_states[i * n..(i + 1) * n], d_max);
            for u in 0..n {
                states[(row, u)] = s[u];
                next_states[(row, u)] = s2[u];
            }
            actions.push(self.actions[i]);
            rewards.push(match reshape_lambda {
                Some(l) => self.penalties[i] - l * self.costs[i] as f64,
                None => self.rewards[i],
            });
        }
        Ok(Batch {
            states,
            actions,
            next_states,
            rewards,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: u32) -> Transition {
        Transition {
            state: vec![tag],
            action: 0,
            next_state: vec![tag + 1],
            reward: -(tag as f64),
            penalty: -(tag as f64),
            cost: 0,
        }
    }

    #[test]
    fn evicts_oldest() {
        let mut buf = ReplayBuffer::new(2, 1).unwrap();
        for t in 0..3 {
            buf.push(tr(t));
        }
        let held: Vec<u32> = buf.iter().map(|t| t.state[0]).collect();
        assert_eq!(held, vec![1, 2]);
        assert_eq!(buf.total_pushed(), 3);
    }

    #[test]
    fn samples_with_replacement() {
        let mut buf = ReplayBuffer::new(4, 1).unwrap();
        buf.push(tr(7));
        let batch = buf.sample_transitions(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch, vec![tr(7), tr(7), tr(7)]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut buf = ReplayBuffer::new(100, 1).unwrap();
        for t in 0..50 {
            buf.push(tr(t));
        }
        let a = buf.sample_indices(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = buf.sample_indices(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_zero_capacity() {
        assert!(ReplayBuffer::new(0, 1).is_err());
        let buf = ReplayBuffer::new(3, 1).unwrap();
        assert!(matches!(
            buf.sample_indices(1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn reshaping_uses_stored_penalty() {
        let mut buf = ReplayBuffer::new(1, 2).unwrap();
        buf.push(Transition {
            state: vec![2, 4],
            action: 1,
            next_state: vec![0, 4],
            reward: -6.5,
            penalty: -6.0,
            cost: 1,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = buf.sample(1, 4, None, &mut rng).unwrap();
        assert_eq!(b.rewards, vec![-6.5]);
        assert_eq!(b.states.row(0).to_vec(), vec![0.5, 1.0]);
        let b = buf.sample(1, 4, Some(2.0), &mut rng).unwrap();
        assert_eq!(b.rewards, vec![-8.0]);
    }
}
