//! Fixed-vocabulary prompt encoder. The `<AGE>` slot carries a learned
//! projection of a sinusoidal code of the numeric age.

use rand::Rng;
use timeweaver_tensor::nn::{sinusoidal, Init, Linear};
use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::synthlab::{MAX_AGE, MIN_AGE};

pub const VOCAB: [&str; 8] = ["photo", "of", "a", "person", "year", "old", "<AGE>", "<pad>"];
pub const PROMPT_LEN: usize = 7;
const AGE_CODE_DIM: usize = 32;
const AGE_PERIOD: f32 = 400.0;

const PHOTO: usize = 0;
const OF: usize = 1;
const A: usize = 2;
const PERSON: usize = 3;
const YEAR: usize = 4;
const OLD: usize = 5;
const AGE: usize = 6;
const PAD: usize = 7;

/// Token layout of a prompt, before embedding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub ids: [usize; PROMPT_LEN],
    pub tau: Option<u32>,
    /// Positions of `<AGE>`, `year`, `old`; empty for the generic prompt.
    pub age_token_indices: Vec<usize>,
}

impl Prompt {
    /// "photo of a person"
    pub fn generic() -> Self {
        Self { ids: [PHOTO, OF, A, PERSON, PAD, PAD, PAD], tau: None, age_token_indices: Vec::new() }
    }

    /// "photo of a <tau> year old person"
    pub fn aged(tau: u32) -> Result<Self> {
        if !(MIN_AGE..=MAX_AGE).contains(&tau) {
            return Err(Error::InvalidArgument(format!("age {tau} outside [{MIN_AGE}, {MAX_AGE}]")));
        }
        Ok(Self { ids: [PHOTO, OF, A, AGE, YEAR, OLD, PERSON], tau: Some(tau), age_token_indices: vec![3, 4, 5] })
    }

    pub fn new(tau: Option<u32>) -> Result<Self> {
        match tau {
            Some(t) => Self::aged(t),
            None => Ok(Self::generic()),
        }
    }

    pub fn words(&self) -> Vec<String> {
        self.ids
            .iter()
            .map(|&i| match (i, self.tau) {
                (AGE, Some(t)) => t.to_string(),
                _ => VOCAB[i].to_string(),
            })
            .collect()
    }
}

/// Embedded prompt: `[PROMPT_LEN, d_c]` tokens plus the age-token selector.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub tokens: Tensor,
    pub age_token_indices: Vec<usize>,
    pub tau: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: String,
    pub pos: String,
    pub age: Linear,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let table = store.insert(&format!("{name}.table"), Tensor::randn(&[VOCAB.len(), dim], 1.0, rng));
        let pos = store.insert(&format!("{name}.pos"), Tensor::randn(&[PROMPT_LEN, dim], 0.1, rng));
        let age = Linear::new(store, &format!("{name}.age"), AGE_CODE_DIM, dim, true, Init::FanIn(1.0), rng);
        Self { table, pos, age, dim }
    }

    /// `[B, PROMPT_LEN, dim]` for a batch of prompts.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, prompts: &[Prompt]) -> Var<'g> {
        let b = prompts.len();
        let ids: Vec<usize> = prompts.iter().flat_map(|p| p.ids).collect();
        let d = self.dim;
        let x = g.param(&self.table).gather_rows(&ids).reshape(&[b, PROMPT_LEN * d]);
        let x = x.add_bias(g.param(&self.pos).reshape(&[PROMPT_LEN * d])).reshape(&[b * PROMPT_LEN, d]);
        let aged: Vec<(usize, u32)> =
            prompts.iter().enumerate().filter_map(|(i, p)| p.tau.map(|t| (i, t))).collect();
        if aged.is_empty() {
            return x.reshape(&[b, PROMPT_LEN, d]);
        }
        let taus: Vec<f32> = aged.iter().map(|&(_, t)| t as f32).collect();
        let code = g.constant(sinusoidal(&taus, AGE_CODE_DIM, AGE_PERIOD));
        let age_rows = self.age.forward(g, code);
        let mut place = Tensor::zeros(&[b * PROMPT_LEN, aged.len()]);
        for (k, &(i, _)) in aged.iter().enumerate() {
            let slot = prompts[i].ids.iter().position(|&id| id == AGE).expect("aged prompt has an <AGE> slot");
            place.data_mut()[(i * PROMPT_LEN + slot) * aged.len() + k] = 1.0;
        }
        x.add(g.constant(place).matmul(age_rows)).reshape(&[b, PROMPT_LEN, d])
    }

    pub fn encode(&self, store: &ParamStore, prompt: &Prompt) -> Result<PromptTokens> {
        let g = Graph::no_grad(store);
        let t = self.forward(&g, std::slice::from_ref(prompt)).value();
        Ok(PromptTokens {
            tokens: t.as_ref().clone().reshape(&[PROMPT_LEN, self.dim])?,
            age_token_indices: prompt.age_token_indices.clone(),
            tau: prompt.tau,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn encoder() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "text", 16, &mut seed::rng(2));
        (enc, store)
    }

    #[test]
    fn prompt_layouts() {
        let g = Prompt::new(None).unwrap();
        assert!(g.age_token_indices.is_empty());
        assert_eq!(g.words()[..4], ["photo", "of", "a", "person"]);
        let a = Prompt::new(Some(24)).unwrap();
        assert_eq!(a.age_token_indices, vec![3, 4, 5]);
        assert_eq!(a.words().join(" "), "photo of a 24 year old person");
        assert!(Prompt::new(Some(4)).is_err());
        assert!(Prompt::new(Some(91)).is_err());
    }

    #[test]
    fn ages_differ_only_in_the_age_row() {
        let (enc, store) = encoder();
        let a = enc.encode(&store, &Prompt::aged(24).unwrap()).unwrap().tokens;
        let b = enc.encode(&store, &Prompt::aged(70).unwrap()).unwrap().tokens;
        for r in 0..PROMPT_LEN {
            let (ra, rb) = (&a.data()[r * 16..(r + 1) * 16], &b.data()[r * 16..(r + 1) * 16]);
            if r == 3 {
                assert_ne!(ra, rb);
            } else {
                assert_eq!(ra, rb);
            }
        }
    }

    #[test]
    fn batched_encoding_matches_single() {
        let (enc, store) = encoder();
        let prompts = [Prompt::generic(), Prompt::aged(50).unwrap(), Prompt::aged(12).unwrap()];
        let g = Graph::no_grad(&store);
        let all = enc.forward(&g, &prompts).value();
        for (i, p) in prompts.iter().enumerate() {
            let one = enc.encode(&store, p).unwrap().tokens;
            assert_eq!(all.index_first(i).unwrap().data(), one.data());
        }
    }
}
