use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::{block_forward, layer_norm};
use super::{ArchConfig, Model, TextEncoderParams};

/// Prompt prefix prepended to every class name.
pub const PROMPT_TEMPLATE: &str = "This is an image of";

/// Fixed word-level vocabulary: the template words followed by one token
/// per class name.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    class_names: Vec<String>,
    template_len: usize,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(class_names: &[S]) -> Result<Self> {
        let mut words: Vec<String> = PROMPT_TEMPLATE.split_whitespace().map(str::to_lowercase).collect();
        let template_len = words.len();
        let mut names = Vec::with_capacity(class_names.len());
        for name in class_names {
            let name = name.as_ref().trim().to_lowercase();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("class name `{name}` must be one word")));
            }
            if words.contains(&name) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word `{name}`")));
            }
            words.push(name.clone());
            names.push(name);
        }
        Ok(Vocab {
            words,
            class_names: names,
            template_len,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn max_prompt_len(&self) -> usize {
        self.template_len + 1
    }

    pub fn prompt(&self, class_id: usize) -> Result<String> {
        let name = self
            .class_names
            .get(class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {class_id}")))?;
        Ok(format!("{PROMPT_TEMPLATE} {name}"))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words
                    .iter()
                    .position(|x| *x == w)
                    .ok_or_else(|| Error::InvalidArgument(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }
}

/// Embeds the prompts of `class_ids`; returns a `K'×E` node of unit rows.
pub fn text_forward(
    g: &mut Graph,
    p: &TextEncoderParams<Var>,
    arch: &ArchConfig,
    vocab: &Vocab,
    class_ids: &[usize],
) -> Result<Var> {
    let k = class_ids.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no classes to encode".into()));
    }
    let tokens: Vec<Vec<usize>> = class_ids
        .iter()
        .map(|&c| vocab.tokenize(&vocab.prompt(c)?))
        .collect::<Result<_>>()?;
    let t = tokens[0].len();
    if tokens.iter().any(|ts| ts.len() != t) {
        return Err(Error::InvalidArgument("prompts must share a token length".into()));
    }
    let flat: Vec<usize> = tokens.concat();
    let x = g.gather_rows(p.token_embed, &flat)?;
    let pos_idx: Vec<usize> = (0..k).flat_map(|_| 0..t).collect();
    let pos = g.gather_rows(p.pos_embed, &pos_idx)?;
    let mut x = g.add(x, pos)?;
    for block in &p.blocks {
        x = block_forward(g, x, block, k, t, arch.text_heads, arch.ln_eps)?;
    }
    let y = layer_norm(g, x, &p.ln_final, arch.ln_eps)?;
    // Mean over each prompt's tokens as a constant averaging matrix.
    let mut avg = vec![0.0; k * k * t];
    for i in 0..k {
        for j in 0..t {
            avg[i * k * t + i * t + j] = 1.0 / t as f64;
        }
    }
    let avg = g.constant_matrix(k, k * t, avg);
    let pooled = g.matmul(avg, y)?;
    let z = g.matmul(pooled, p.proj)?;
    g.l2_normalize_rows(z)
}

/// Unit-norm text embeddings for `class_ids`, as a `K'×E` tensor.
pub fn encode_texts(model: &Model, arch: &ArchConfig, vocab: &Vocab, class_ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let text = model.text.map("text", &mut |_, t| g.constant(t));
    let z = text_forward(&mut g, &text, arch, vocab, class_ids)?;
    Ok(g.value(z))
}

pub fn encode_text(model: &Model, arch: &ArchConfig, vocab: &Vocab, class_id: usize) -> Result<Vec<f64>> {
    Ok(encode_texts(model, arch, vocab, &[class_id])?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_params;
    use crate::rng::RngStream;

    fn vocab8() -> Vocab {
        Vocab::new(&["disk", "square", "triangle", "ring", "cross", "bar", "diamond", "ell"]).unwrap()
    }

    #[test]
    fn tokenizes_template() {
        let v = vocab8();
        assert_eq!(v.tokenize(&v.prompt(0).unwrap()).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(v.len(), 13);
        assert!(v.prompt(8).is_err());
        assert!(v.tokenize("a picture").is_err());
    }

    #[test]
    fn embeddings_are_unit_distinct_and_pure() {
        let arch = ArchConfig::default();
        let v = vocab8();
        let m = init_params(&arch, &v, &RngStream::new(4096)).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let e = encode_texts(&m, &arch, &v, &all).unwrap();
        for c in 0..8 {
            let n: f64 = e.row(c).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let mut min_dist = f64::INFINITY;
        for a in 0..8 {
            for b in a + 1..8 {
                let d: f64 = e.row(a).iter().zip(e.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0);
        let single = encode_text(&m, &arch, &v, 3).unwrap();
        assert_eq!(single, encode_text(&m, &arch, &v, 3).unwrap());
        let diff = single.iter().zip(e.row(3)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let arch = ArchConfig::default();
        let v = vocab8();
        let m = init_params(&arch, &v, &RngStream::new(1)).unwrap();
        assert!(encode_text(&m, &arch, &v, 8).is_err());
    }
}
