//! Adjacent-transposition sorting environment.
//!
//! The state is a permutation of the token ids `1..=len`. Each action swaps
//! one adjacent pair. Reaching the sorted order pays `+1`; every other step
//! costs `0.001`. Episodes end when the permutation is sorted (terminated) or
//! when the step cap is hit (truncated).

use std::fmt;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_LENGTH: usize = 3;
pub const MAX_LENGTH: usize = 10;

/// Reward paid by the transition that produces the sorted permutation.
pub const SORTED_REWARD: f32 = 1.0;
/// Reward paid by every other transition.
pub const STEP_PENALTY: f32 = -0.001;

pub const DEFAULT_MAX_STEPS: usize = 1000;

/// An ordering of the token ids `1..=len`, `MIN_LENGTH <= len <= MAX_LENGTH`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Permutation(Vec<u8>);

impl Permutation {
    pub fn new(tokens: Vec<u8>) -> Result<Self> {
        let len = tokens.len();
        if !(MIN_LENGTH..=MAX_LENGTH).contains(&len) {
            return Err(Error::InvalidPermutation(format!(
                "length {len} outside [{MIN_LENGTH}, {MAX_LENGTH}]"
            )));
        }
        let mut seen = [false; MAX_LENGTH + 1];
        for &t in &tokens {
            let t = t as usize;
            if t == 0 || t > len || seen[t] {
                return Err(Error::InvalidPermutation(format!(
                    "{tokens:?} is not a bijection onto 1..={len}"
                )));
            }
            seen[t] = true;
        }
        Ok(Self(tokens))
    }

    pub fn identity(len: usize) -> Result<Self> {
        Self::new((1..=len as u8).collect())
    }

    /// Every permutation of `1..=len` in lexicographic order.
    pub fn all(len: usize) -> Result<impl Iterator<Item = Permutation>> {
        Self::identity(len)?;
        Ok((1..=len as u8).permutations(len).map(Permutation))
    }

    /// Every permutation except the sorted one, in lexicographic order.
    pub fn all_unsorted(len: usize) -> Result<impl Iterator<Item = Permutation>> {
        Ok(Self::all(len)?.filter(|p| !p.is_sorted()))
    }

    /// Uniform draw over the `len! - 1` unsorted permutations.
    pub fn random_unsorted<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        let mut tokens = Self::identity(len)?.0;
        loop {
            tokens.shuffle(rng);
            if !is_increasing(&tokens) {
                return Ok(Self(tokens));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn is_sorted(&self) -> bool {
        is_increasing(&self.0)
    }

    /// Number of pairs `i < j` with `tokens[i] > tokens[j]`; also the minimum
    /// number of adjacent swaps needed to sort.
    pub fn inversion_count(&self) -> usize {
        let t = &self.0;
        (0..t.len())
            .map(|i| t[i + 1..].iter().filter(|&&b| b < t[i]).count())
            .sum()
    }

    /// Returns a copy with positions `a` and `a + 1` exchanged.
    pub fn apply_swap(&self, action: SwapAction) -> Result<Self> {
        action.check(self.len())?;
        let mut tokens = self.0.clone();
        tokens.swap(action.index(), action.index() + 1);
        Ok(Self(tokens))
    }

    /// Whether swapping `action` strictly reduces the inversion count, i.e.
    /// the pair it touches is descending.
    pub fn is_correct_swap(&self, action: SwapAction) -> bool {
        let i = action.index();
        i + 1 < self.len() && self.0[i] > self.0[i + 1]
    }
}

fn is_increasing(tokens: &[u8]) -> bool {
    tokens.windows(2).all(|w| w[0] < w[1])
}

impl TryFrom<Vec<u8>> for Permutation {
    type Error = Error;

    fn try_from(tokens: Vec<u8>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Permutation> for Vec<u8> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation{:?}", self.0)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.0.iter().join(","))
    }
}

/// Swap of the adjacent pair `(index, index + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwapAction(usize);

impl SwapAction {
    pub const fn new(index: usize) -> Self {
        Self(index)
    }

    pub const fn index(self) -> usize {
        self.0
    }

    pub fn check(self, len: usize) -> Result<()> {
        if self.0 + 1 >= len {
            return Err(Error::Contract(format!(
                "swap index {} out of range for length {len}",
                self.0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub length: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            length,
            max_steps: DEFAULT_MAX_STEPS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_LENGTH..=MAX_LENGTH).contains(&self.length) {
            return Err(Error::Config(format!(
                "length must be in [{MIN_LENGTH}, {MAX_LENGTH}], got {}",
                self.length
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Permutation,
    pub reward: f32,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// One environment transition. `episode_steps` counts the swaps already made
/// in the current episode.
pub fn step(
    state: &Permutation,
    action: SwapAction,
    episode_steps: usize,
    cfg: &EnvConfig,
) -> Result<StepOutcome> {
    if state.is_sorted() {
        return Err(Error::Contract(
            "step called on a terminated episode".into(),
        ));
    }
    if episode_steps >= cfg.max_steps {
        return Err(Error::Contract("step called on a truncated episode".into()));
    }
    let next_state = state.apply_swap(action)?;
    let terminated = next_state.is_sorted();
    let reward = if terminated {
        SORTED_REWARD
    } else {
        STEP_PENALTY
    };
    let truncated = !terminated && episode_steps + 1 >= cfg.max_steps;
    Ok(StepOutcome {
        next_state,
        reward,
        terminated,
        truncated,
    })
}

/// A single stateful environment instance with its own seeded random stream.
#[derive(Clone, Debug)]
pub struct SortEnv {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: Permutation,
    episode_steps: usize,
    finished: bool,
}

impl SortEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = Permutation::random_unsorted(cfg.length, &mut rng)?;
        Ok(Self {
            cfg,
            rng,
            state,
            episode_steps: 0,
            finished: false,
        })
    }

    /// Draws a fresh unsorted start state and zeroes the step counter.
    pub fn reset(&mut self) -> &Permutation {
        self.state = reset(&self.cfg, &mut self.rng);
        self.episode_steps = 0;
        self.finished = false;
        &self.state
    }

    pub fn state(&self) -> &Permutation {
        &self.state
    }

    pub fn episode_steps(&self) -> usize {
        self.episode_steps
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn step(&mut self, action: SwapAction) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::Contract("step called after episode end".into()));
        }
        let outcome = step(&self.state, action, self.episode_steps, &self.cfg)?;
        self.state = outcome.next_state.clone();
        self.episode_steps += 1;
        self.finished = outcome.done();
        Ok(outcome)
    }
}

/// Uniform start state over the unsorted permutations of `cfg.length`.
pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Permutation {
    Permutation::random_unsorted(cfg.length, rng).expect("length validated by EnvConfig")
}
