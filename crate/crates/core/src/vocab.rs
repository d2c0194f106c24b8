//! Reserved token ids shared by every task and model.

use crate::metrics::Token;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;

/// Task-tag tokens occupy `[FIRST_TAG, FIRST_TAG + NUM_TAGS)`.
pub const FIRST_TAG: Token = 3;
pub const NUM_TAGS: Token = 4;

/// First id available to task content.
pub const FIRST_CONTENT: Token = FIRST_TAG + NUM_TAGS;
