//! Conditional sequence models shared by the query and response tasks.

mod fbg;
mod optim;
mod vocab;

pub use fbg::{Fbg, FbgGradient, CHECKPOINT_VERSION};
pub use optim::{linear_lr, AdamW, DEFAULT_LR};
pub use vocab::{Vocab, BOS, EOS, RESERVED, UNK};

use crate::corpus::{flatten_context, tokenize, Dialogue, TokenSeq};
use crate::error::Result;
use crate::scalar::Scalar;

pub const QUERY_PROMPT: &str = "translate dialogue context to query:";
pub const RESPONSE_PROMPT: &str = "generate system response based on knowledge and dialogue context:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Query,
    Response,
}

pub fn task_prompt(task: Task) -> TokenSeq {
    match task {
        Task::Query => tokenize(QUERY_PROMPT),
        Task::Response => tokenize(RESPONSE_PROMPT),
    }
}

/// Query prompt followed by the flattened context.
pub fn query_input(d: &Dialogue) -> TokenSeq {
    task_prompt(Task::Query).concat(&tokenize(&flatten_context(d)))
}

/// Response prompt, then the knowledge text, then the flattened context.
pub fn response_input(d: &Dialogue, knowledge_text: &str) -> TokenSeq {
    task_prompt(Task::Response)
        .concat(&tokenize(knowledge_text))
        .concat(&tokenize(&flatten_context(d)))
}

/// One decoded output. `ended` is false when decoding stopped at the length
/// limit instead of choosing EOS; `log_prob` includes the EOS term either way.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S> {
    pub tokens: TokenSeq,
    pub log_prob: S,
    pub ended: bool,
}

/// A training example contributing `weight * -log p(output | input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair<S> {
    pub id: String,
    pub input: TokenSeq,
    pub output: TokenSeq,
    pub weight: S,
}

/// A trainable conditional distribution over token sequences.
///
/// Outputs are scored with an implicit trailing EOS.
pub trait CondSeqModel<S: Scalar>: Send + Sync {
    type Gradient;

    fn log_prob(&self, input: &TokenSeq, output: &TokenSeq) -> S;

    /// Finished hypotheses, best first, ties by token order.
    fn beam_search(&self, input: &TokenSeq, beam_size: usize, max_len: usize) -> Vec<Hypothesis<S>>;

    /// Gradient of `sum(weight * -log_prob)` accumulated in batch order.
    fn gradient(&self, batch: &[WeightedPair<S>]) -> Result<Self::Gradient>;

    /// One optimizer step with learning rate `lr`.
    fn step(&mut self, grad: &Self::Gradient, opt: &AdamW, lr: f64);

    fn apply_gradients(&mut self, batch: &[WeightedPair<S>], opt: &AdamW, lr: f64) -> Result<()> {
        let grad = self.gradient(batch)?;
        self.step(&grad, opt, lr);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Role, Utterance};

    #[test]
    fn prompts_tokenize_exactly() {
        assert_eq!(
            task_prompt(Task::Query).join(),
            "translate dialogue context to query"
        );
        assert_eq!(
            task_prompt(Task::Response).join(),
            "generate system response based on knowledge and dialogue context"
        );
    }

    #[test]
    fn task_inputs_differ_for_same_dialogue() {
        let d = Dialogue {
            id: "d".into(),
            context: vec![Utterance {
                role: Role::User,
                text: "hello there".into(),
            }],
            target_response: "hi".into(),
            gold_query: None,
            gold_knowledge_id: None,
        };
        let q = query_input(&d);
        let r = response_input(&d, "some fact");
        assert_eq!(q.join(), "translate dialogue context to query user hello there");
        assert_eq!(
            r.join(),
            "generate system response based on knowledge and dialogue context some fact user hello there"
        );
        assert_ne!(q, r);
    }
}
