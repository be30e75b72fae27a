//! Token ids, position ids and the role tags attached to every sequence entry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;
pub type PositionId = usize;

/// Reserved vocabulary ids. Content tokens start at [`FIRST_CONTENT`].
pub mod special {
    use super::TokenId;

    pub const PAD: TokenId = 0;
    pub const EOS: TokenId = 1;
    /// End of a target segment under read-n decoding.
    pub const EOSEG: TokenId = 2;
    pub const USER: TokenId = 3;
    pub const ASSISTANT: TokenId = 4;
    pub const PROMPT: TokenId = 5;
    pub const FIRST_CONTENT: TokenId = 6;

    pub fn is_special(token: TokenId) -> bool {
        token < FIRST_CONTENT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn token(self) -> TokenId {
        match self {
            Role::User => special::USER,
            Role::Assistant => special::ASSISTANT,
        }
    }
}

/// What an entry of a sequence (and of the KV cache) is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Prompt,
    Role(Role),
    Source,
    Target,
    Pad,
}

impl Tag {
    /// Entries whose hidden states belong to the target side of the stream.
    pub fn is_target_side(self) -> bool {
        matches!(self, Tag::Target | Tag::Role(Role::Assistant))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Prompt => "prompt",
            Tag::Role(Role::User) => "role-u",
            Tag::Role(Role::Assistant) => "role-a",
            Tag::Source => "source",
            Tag::Target => "target",
            Tag::Pad => "pad",
        };
        f.write_str(s)
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "prompt" => Tag::Prompt,
            "role-u" => Tag::Role(Role::User),
            "role-a" => Tag::Role(Role::Assistant),
            "source" => Tag::Source,
            "target" => Tag::Target,
            "pad" => Tag::Pad,
            other => return Err(format!("unknown tag `{other}`")),
        })
    }
}
