//! Synthetic pass-key retrieval tasks over byte tokens.
//!
//! Filler is drawn from lowercase letters, space, comma and period. The needle
//! starts with an uppercase `T` and its value is digits, so neither can arise
//! from filler and the needle occurs exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NEEDLE_KEY: &[u8] = b"The pass key is ";
pub const VALUE_DIGITS: usize = 5;
const FILLER: &[u8] = b"abcdefghijklmnopqrstuvwxyz ,.";
const QUESTION: &[u8] = b" What is the pass key? The pass key is ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasskeyTask {
    pub context: Vec<usize>,
    pub needle_position: usize,
    pub key_tokens: Vec<usize>,
    pub value_tokens: Vec<usize>,
    /// Expected completion; equal to `value_tokens`.
    pub answer: Vec<usize>,
}

impl PasskeyTask {
    pub fn needle(&self) -> Vec<usize> {
        let mut n = self.key_tokens.clone();
        n.extend_from_slice(&self.value_tokens);
        n
    }

    /// Context followed by the retrieval question.
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = self.context.clone();
        p.extend(QUESTION.iter().map(|&b| b as usize));
        p
    }
}

pub fn needle_len() -> usize {
    NEEDLE_KEY.len() + VALUE_DIGITS
}

pub fn gen_passkey_task(context_len: usize, needle_position: usize, seed: u64) -> Result<PasskeyTask> {
    let len = needle_len();
    if context_len < len + 2 {
        return Err(Error::Input(format!(
            "context of {context_len} tokens cannot hold a {len}-token needle"
        )));
    }
    if needle_position + len > context_len {
        return Err(Error::Input(format!(
            "needle at {needle_position} overruns a context of {context_len} tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key_tokens: Vec<usize> = NEEDLE_KEY.iter().map(|&b| b as usize).collect();
    let value_tokens: Vec<usize> = (0..VALUE_DIGITS)
        .map(|_| (b'0' + rng.gen_range(0..10u8)) as usize)
        .collect();

    let mut context: Vec<usize> = (0..context_len)
        .map(|_| FILLER[rng.gen_range(0..FILLER.len())] as usize)
        .collect();
    let needle: Vec<usize> = key_tokens.iter().chain(&value_tokens).copied().collect();
    context[needle_position..needle_position + len].copy_from_slice(&needle);

    Ok(PasskeyTask {
        context,
        needle_position,
        answer: value_tokens.clone(),
        key_tokens,
        value_tokens,
    })
}

/// Number of (possibly overlapping) occurrences of `needle` in `haystack`.
pub fn count_occurrences(haystack: &[usize], needle: &[usize]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}
