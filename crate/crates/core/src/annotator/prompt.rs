//! Prompt messages: system instruction, demo sentences, demo labels, batch.

use serde::{Deserialize, Serialize};

use super::demos::Demo;
use super::parse::render_numbered;
use super::wire::ChatMessage;
use crate::corpus::SampleId;

/// Per-dataset slots of the system instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    /// Plural description of the inputs, e.g. "movie reviews".
    pub text_type: String,
    /// Short noun for the items, e.g. "reviews".
    pub item_noun: String,
    pub class_names: Vec<String>,
}

impl PromptMeta {
    pub fn new(text_type: impl Into<String>, class_names: Vec<String>) -> Self {
        let text_type = text_type.into();
        let item_noun = text_type
            .split_whitespace()
            .last()
            .unwrap_or("texts")
            .to_string();
        Self {
            text_type,
            item_noun,
            class_names,
        }
    }

    pub fn with_item_noun(mut self, noun: impl Into<String>) -> Self {
        self.item_noun = noun.into();
        self
    }

    pub fn system_instruction(&self) -> String {
        format!(
            "You have been trained to classify {text_type}. The user will give you some {text_type}, \
             and you will classify the {noun} into {c} categories: {names}. \
             You should use the given class names only. The examples are given by the user \
             and they should be used as your references. \
             You should respond in a json format with the class names only.",
            text_type = self.text_type,
            noun = self.item_noun,
            c = self.class_names.len(),
            names = self.class_names.join(", "),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub batch_ids: Vec<SampleId>,
    pub demo_count: usize,
    pub class_count: usize,
}

impl PromptBundle {
    pub fn batch_size(&self) -> usize {
        self.batch_ids.len()
    }
}

/// Builds the message list for one request. Demo messages are omitted when
/// `demos` is empty.
pub fn build_prompt(
    meta: &PromptMeta,
    demos: &[Demo],
    batch: &[(SampleId, &str)],
    demos_per_class: usize,
) -> PromptBundle {
    assert!(!batch.is_empty(), "prompt batch must not be empty");
    let mut messages = vec![ChatMessage::system(meta.system_instruction())];
    if !demos.is_empty() {
        let sentences: Vec<&str> = demos.iter().map(|d| d.text.as_str()).collect();
        let labels: Vec<&str> = demos
            .iter()
            .map(|d| meta.class_names[d.label].as_str())
            .collect();
        messages.push(ChatMessage::user(render_numbered(&sentences)));
        messages.push(ChatMessage::user(render_numbered(&labels)));
    }
    let texts: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
    messages.push(ChatMessage::user(render_numbered(&texts)));
    PromptBundle {
        messages,
        batch_ids: batch.iter().map(|(id, _)| *id).collect(),
        demo_count: demos_per_class,
        class_count: meta.class_names.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::wire::Role;

    fn rt_meta() -> PromptMeta {
        PromptMeta::new("movie reviews", vec!["Negative".into(), "Positive".into()])
    }

    fn demos() -> Vec<Demo> {
        vec![
            Demo { id: 3, text: "first example sentence".into(), label: 0 },
            Demo { id: 9, text: "second example sentence".into(), label: 1 },
        ]
    }

    #[test]
    fn table_layout() {
        let b = build_prompt(&rt_meta(), &demos(), &[(20, "sentence to label"), (21, "sentence to label")], 1);
        assert_eq!(b.messages.len(), 4);
        assert_eq!(b.messages[0].role, Role::System);
        assert!(b.messages[0].content.contains("2 categories: Negative, Positive"));
        assert!(b.messages[0].content.contains("classify the reviews"));
        assert!(b.messages[1..].iter().all(|m| m.role == Role::User));
        assert_eq!(b.messages[1].content, "1. first example sentence; 2. second example sentence;");
        assert_eq!(b.messages[2].content, "1. Negative; 2. Positive;");
        assert_eq!(b.messages[3].content, "1. sentence to label; 2. sentence to label;");
        assert_eq!(b.batch_ids, vec![20, 21]);
        assert_eq!((b.demo_count, b.class_count), (1, 2));
    }

    #[test]
    fn zero_demos_gives_two_messages() {
        let b = build_prompt(&rt_meta(), &[], &[(0, "only one")], 0);
        assert_eq!(b.messages.len(), 2);
        assert_eq!(b.messages[1].content, "1. only one;");
    }

    #[test]
    fn pure() {
        let a = build_prompt(&rt_meta(), &demos(), &[(1, "x")], 1);
        let b = build_prompt(&rt_meta(), &demos(), &[(1, "x")], 1);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }
}
