//! Fixed user prompts and the text template used to condition the decoder on
//! a dialogue.

use serde::{Deserialize, Serialize};

use crate::model::WRAPPER_TOKENS;
use crate::tokenizer::{TokenSequence, Tokenizer};

/// The four questions of a standard diagnosis session, in order.
pub const CANONICAL_PROMPTS: [&str; 4] = [
    "Could you describe the skin disease in this image for me?",
    "Please provide a paragraph listing additional features you observed in the image.",
    "Based on the previous information, please provide a detailed explanation of the cause of this skin disease.",
    "What treatment and medication should be recommended for this case?",
];

/// Question used to ask for a class name, both when training on diagnosis
/// notes and when probing a checkpoint.
pub const DIAGNOSIS_QUERY: &str = "What is the diagnosis for this case?";

pub const USER_TAG: &str = "User:";
pub const ASSISTANT_TAG: &str = "Assistant:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

/// `User: … Assistant: …` for every turn, ending with an open assistant tag.
pub fn render(history: &[Turn], message: &str) -> String {
    let mut out = String::new();
    for t in history {
        let tag = match t.role {
            Role::User => USER_TAG,
            Role::Assistant => ASSISTANT_TAG,
        };
        out.push_str(tag);
        out.push(' ');
        out.push_str(t.text.trim());
        out.push(' ');
    }
    out.push_str(USER_TAG);
    out.push(' ');
    out.push_str(message.trim());
    out.push(' ');
    out.push_str(ASSISTANT_TAG);
    out
}

/// A rendered dialogue that fits the decoder context.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPrompt {
    pub tokens: TokenSequence,
    /// Leading history turns left out to make room.
    pub dropped_turns: usize,
    /// The new message itself had to be cut from the front.
    pub message_cut: bool,
}

impl RenderedPrompt {
    pub fn truncated(&self) -> bool {
        self.dropped_turns > 0 || self.message_cut
    }
}

/// Drops whole exchanges, oldest first, until the prompt plus `reserve`
/// generated tokens fits in `max_text_len`.
pub fn fit_prompt(
    tokenizer: &Tokenizer,
    history: &[Turn],
    message: &str,
    max_text_len: usize,
    reserve: usize,
) -> RenderedPrompt {
    let budget = max_text_len.saturating_sub(WRAPPER_TOKENS);
    let reserve = reserve.min(budget / 2);
    let limit = budget - reserve;
    let mut start = 0;
    loop {
        let tokens = tokenizer.tokenize(&render(&history[start..], message)).as_context();
        if tokens.len() <= limit {
            return RenderedPrompt { tokens, dropped_turns: start, message_cut: false };
        }
        if start >= history.len() {
            let keep = tokens.len() - limit.max(1);
            let ids = tokens.ids[keep..].to_vec();
            return RenderedPrompt {
                tokens: TokenSequence::new(ids, false),
                dropped_turns: history.len(),
                message_cut: true,
            };
        }
        start += 1;
        if start < history.len() && history[start].role == Role::Assistant {
            start += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_single_and_multi_turn() {
        assert_eq!(render(&[], "Hi"), "User: Hi Assistant:");
        let h = [Turn::user("a"), Turn::assistant("b")];
        assert_eq!(render(&h, "c"), "User: a Assistant: b User: c Assistant:");
    }

    #[test]
    fn oldest_exchanges_go_first() {
        let words = "one two three four five six seven eight nine ten User: Assistant: c";
        let tk = Tokenizer::build([words], false);
        let h = vec![
            Turn::user("one two three"),
            Turn::assistant("four five six"),
            Turn::user("seven"),
            Turn::assistant("eight"),
        ];
        let full = fit_prompt(&tk, &h, "c", 64, 0);
        assert_eq!(full.dropped_turns, 0);
        assert!(!full.truncated());
        let need = full.tokens.len();
        let fit = fit_prompt(&tk, &h, "c", need + WRAPPER_TOKENS - 1, 0);
        assert_eq!(fit.dropped_turns, 2);
        assert_eq!(tk.detokenize(&fit.tokens.ids), "User: seven Assistant: eight User: c Assistant:");
        let tiny = fit_prompt(&tk, &h, "one two three four five six", WRAPPER_TOKENS + 4, 0);
        assert!(tiny.message_cut);
        assert_eq!(tiny.tokens.len(), 4);
    }
}
