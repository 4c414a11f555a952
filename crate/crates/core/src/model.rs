//! Desk-scale conditional token generator.
//!
//! The model is a single linear head `W` (`V × 2V`) applied to the feature
//! vector `φ = [one-hot(previous token) ∥ bag-of-tokens(input) / |input|]`.
//! Decoding is greedy. The head lives at the adaptation site [`LM_HEAD`], so
//! a [`LowRankDelta`] with that single site personalizes it.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{BaseParams, EffectiveParams, LowRankDelta, Matrix, SiteFactors};
use crate::error::{Error, Result};

pub const LM_HEAD: &str = "lm_head";

pub type Token = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    end_token: Token,
    index: HashMap<String, Token>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, end_token: Token) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if end_token >= tokens.len() {
            return Err(Error::Config(format!("end token {end_token} out of range")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            end_token,
            index,
        })
    }

    /// `<end>` followed by `w01 .. w{size-1}`.
    pub fn synthetic(size: usize) -> Result<Self> {
        let width = (size.max(2) - 1).to_string().len().max(2);
        let tokens = std::iter::once("<end>".to_string())
            .chain((1..size).map(|i| format!("w{i:0width$}")))
            .collect();
        Self::new(tokens, 0)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn end_token(&self) -> Token {
        self.end_token
    }

    pub fn token(&self, id: Token) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocab {
                token: id,
                size: self.size(),
            })
    }

    pub fn lookup(&self, s: &str) -> Result<Token> {
        self.index
            .get(s)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown token `{s}`")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[Token]) -> Result<String> {
        Ok(ids
            .iter()
            .map(|&i| self.token(i))
            .collect::<Result<Vec<_>>>()?
            .join(" "))
    }

    pub fn model(&self) -> TaskModel {
        TaskModel {
            vocab_size: self.size(),
            end_token: self.end_token,
        }
    }

    /// One token per line, end token first.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.tokens[self.end_token])?;
        for (i, t) in self.tokens.iter().enumerate() {
            if i != self.end_token {
                writeln!(w, "{t}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let tokens = r
            .lines()
            .map(|l| l.map(|s| s.trim().to_string()))
            .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::new(tokens, 0)
    }
}

/// An `(input, reference)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: Vec<Token>,
    pub reference: Vec<Token>,
}

impl Example {
    pub fn new(input: Vec<Token>, reference: Vec<Token>) -> Result<Self> {
        if input.is_empty() || reference.is_empty() {
            return Err(Error::data("example input and reference must be nonempty"));
        }
        Ok(Self { input, reference })
    }
}

/// Full-batch gradient descent settings for per-user adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rank: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Standard deviation of the initial `A` entries.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            steps: 150,
            step_size: 2.0,
            init_scale: 0.3,
            seed: 0,
        }
    }
}

/// Shape information shared by all parameter sets of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskModel {
    pub vocab_size: usize,
    pub end_token: Token,
}

impl TaskModel {
    fn check(&self, t: Token) -> Result<()> {
        if t < self.vocab_size {
            Ok(())
        } else {
            Err(Error::Vocab {
                token: t,
                size: self.vocab_size,
            })
        }
    }

    fn head<'a>(&self, params: &'a EffectiveParams) -> Result<&'a Matrix> {
        let w = params.site(LM_HEAD)?;
        if w.nrows() != self.vocab_size || w.ncols() != 2 * self.vocab_size {
            return Err(Error::layout(format!(
                "lm_head is {}x{}, expected {}x{}",
                w.nrows(),
                w.ncols(),
                self.vocab_size,
                2 * self.vocab_size
            )));
        }
        Ok(w)
    }

    /// Normalized token counts of `input`.
    pub fn bag(&self, input: &[Token]) -> Result<DVector<f64>> {
        let mut bag = DVector::zeros(self.vocab_size);
        for &t in input {
            self.check(t)?;
            bag[t] += 1.0;
        }
        if !input.is_empty() {
            bag /= input.len() as f64;
        }
        Ok(bag)
    }

    pub fn features(&self, prev: Token, input: &[Token]) -> Result<DVector<f64>> {
        self.check(prev)?;
        let v = self.vocab_size;
        let mut phi = DVector::zeros(2 * v);
        phi[prev] = 1.0;
        phi.rows_mut(v, v).copy_from(&self.bag(input)?);
        Ok(phi)
    }

    /// Input-dependent part of the logits, `W[:, V..2V] · bag`.
    fn context_logits(&self, w: &Matrix, input: &[Token]) -> Result<DVector<f64>> {
        let v = self.vocab_size;
        Ok(w.columns(v, v) * self.bag(input)?)
    }

    pub fn forward_logits(
        &self,
        params: &EffectiveParams,
        prev: Token,
        input: &[Token],
    ) -> Result<DVector<f64>> {
        let w = self.head(params)?;
        Ok(w * self.features(prev, input)?)
    }

    /// Greedy decode from the begin state (previous token = end token).
    pub fn generate(&self, params: &EffectiveParams, input: &[Token], max_len: usize) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::Usage("max_len must be at least 1".into()));
        }
        let w = self.head(params)?;
        let ctx = self.context_logits(w, input)?;
        let mut out = Vec::with_capacity(max_len);
        let mut prev = self.end_token;
        let mut logits = DVector::zeros(self.vocab_size);
        while out.len() < max_len {
            logits.copy_from(&ctx);
            logits += w.column(prev);
            let next = argmax_lowest(logits.as_slice());
            if next == self.end_token {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Teacher-forced negative log-likelihood of `reference ++ [end]`.
    pub fn sequence_nll(&self, params: &EffectiveParams, example: &Example) -> Result<f64> {
        let w = self.head(params)?;
        self.nll_with_head(w, example)
    }

    fn nll_with_head(&self, w: &Matrix, example: &Example) -> Result<f64> {
        if example.reference.is_empty() {
            return Err(Error::data("reference must be nonempty"));
        }
        let ctx = self.context_logits(w, &example.input)?;
        let mut prev = self.end_token;
        let mut nll = 0.0;
        let mut logits = DVector::zeros(self.vocab_size);
        for &t in example.reference.iter().chain(std::iter::once(&self.end_token)) {
            self.check(t)?;
            logits.copy_from(&ctx);
            logits += w.column(prev);
            nll += log_sum_exp(logits.as_slice()) - logits[t];
            prev = t;
        }
        Ok(nll)
    }

    /// NLL and its gradient with respect to the dense head.
    pub fn nll_and_head_gradient(&self, w: &Matrix, example: &Example) -> Result<(f64, Matrix)> {
        let v = self.vocab_size;
        let mut grad = Matrix::zeros(v, 2 * v);
        let nll = self.accumulate_head_gradient(w, example, 1.0, &mut grad)?;
        Ok((nll, grad))
    }

    fn accumulate_head_gradient(
        &self,
        w: &Matrix,
        example: &Example,
        scale: f64,
        grad: &mut Matrix,
    ) -> Result<f64> {
        if example.reference.is_empty() {
            return Err(Error::data("reference must be nonempty"));
        }
        let v = self.vocab_size;
        let bag = self.bag(&example.input)?;
        let ctx = w.columns(v, v) * &bag;
        let mut prev = self.end_token;
        let mut nll = 0.0;
        let mut g_total = DVector::zeros(v);
        let mut logits = DVector::zeros(v);
        for &t in example.reference.iter().chain(std::iter::once(&self.end_token)) {
            self.check(t)?;
            logits.copy_from(&ctx);
            logits += w.column(prev);
            let lse = log_sum_exp(logits.as_slice());
            nll += lse - logits[t];
            let mut g = logits.map(|x| (x - lse).exp());
            g[t] -= 1.0;
            grad.column_mut(prev).axpy(scale, &g, 1.0);
            g_total += g;
            prev = t;
        }
        grad.columns_mut(v, v).ger(scale, &g_total, &bag, 1.0);
        Ok(nll)
    }

    /// Mean NLL over `examples` at `W0 + B·A`, with gradients for `B` and `A`.
    pub fn adapter_loss_and_grad(
        &self,
        base_head: &Matrix,
        b: &Matrix,
        a: &Matrix,
        examples: &[Example],
    ) -> Result<(f64, Matrix, Matrix)> {
        if examples.is_empty() {
            return Err(Error::data("no examples"));
        }
        let w = base_head + b * a;
        let scale = 1.0 / examples.len() as f64;
        let mut g = Matrix::zeros(w.nrows(), w.ncols());
        let mut loss = 0.0;
        for ex in examples {
            loss += self.accumulate_head_gradient(&w, ex, scale, &mut g)?;
        }
        let gb = &g * a.transpose();
        let ga = b.transpose() * &g;
        Ok((loss * scale, gb, ga))
    }

    fn mean_nll_at(&self, w: &Matrix, examples: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            total += self.nll_with_head(w, ex)?;
        }
        Ok(total / examples.len() as f64)
    }

    /// Fits a rank-`r` adapter at [`LM_HEAD`] to `history` by full-batch
    /// gradient descent. `B` starts at zero; a step that would raise the
    /// loss is retried at half the step size.
    pub fn train_user_adapter(
        &self,
        base: &BaseParams,
        history: &[Example],
        hyper: &TrainConfig,
    ) -> Result<LowRankDelta> {
        if history.is_empty() {
            return Err(Error::data("cannot train an adapter on an empty history"));
        }
        if hyper.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let w0 = self.head(base)?;
        let v = self.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let normal = Normal::new(0.0, hyper.init_scale.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut b = Matrix::zeros(v, hyper.rank);
        let mut a = Matrix::from_fn(hyper.rank, 2 * v, |_, _| normal.sample(&mut rng));

        let mut lr = hyper.step_size;
        let (mut loss, mut gb, mut ga) = self.adapter_loss_and_grad(w0, &b, &a, history)?;
        for _ in 0..hyper.steps {
            let mut accepted = false;
            for _ in 0..30 {
                let b_new = &b - &gb * lr;
                let a_new = &a - &ga * lr;
                let trial = self.mean_nll_at(&(w0 + &b_new * &a_new), history)?;
                if trial <= loss {
                    b = b_new;
                    a = a_new;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
            (loss, gb, ga) = self.adapter_loss_and_grad(w0, &b, &a, history)?;
        }
        LowRankDelta::new(vec![SiteFactors::new(LM_HEAD, b, a)])
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{apply_delta, DenseParams, Materialize};

    fn vocab(n: usize) -> Vocab {
        Vocab::synthetic(n).unwrap()
    }

    fn params(w: Matrix) -> EffectiveParams {
        DenseParams::single(LM_HEAD, w)
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let m = vocab(4).model();
        let logits = m.forward_logits(&params(Matrix::zeros(4, 8)), 0, &[1, 2]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_block_selects_previous_token() {
        let m = vocab(4).model();
        let mut w = Matrix::zeros(4, 8);
        w.view_mut((0, 0), (4, 4)).fill_with_identity();
        for prev in 0..4 {
            let logits = m.forward_logits(&params(w.clone()), prev, &[1, 3]).unwrap();
            let mut expect = DVector::zeros(4);
            expect[prev] = 1.0;
            assert_eq!(logits, expect);
        }
    }

    #[test]
    fn bag_is_normalized_counts() {
        let v = Vocab::new(vec!["<end>".into(), "a".into(), "b".into(), "c".into()], 0).unwrap();
        let input = v.encode("a a b").unwrap();
        let phi = v.model().features(0, &input).unwrap();
        assert_eq!(phi.rows(4, 4).as_slice(), &[0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn out_of_vocab_rejected() {
        let m = vocab(4).model();
        let p = params(Matrix::zeros(4, 8));
        assert!(matches!(
            m.forward_logits(&p, 9, &[1]),
            Err(Error::Vocab { token: 9, .. })
        ));
        assert!(m.generate(&p, &[7], 3).is_err());
    }

    #[test]
    fn end_as_argmax_stops_immediately() {
        let m = vocab(4).model();
        let mut w = Matrix::zeros(4, 8);
        w.row_mut(0).fill(5.0);
        assert!(m.generate(&params(w), &[1, 2], 5).unwrap().is_empty());
    }

    #[test]
    fn forced_token_repeats_to_max_len() {
        let m = vocab(4).model();
        let mut w = Matrix::zeros(4, 8);
        w.row_mut(2).fill(5.0);
        let p = params(w);
        assert_eq!(m.generate(&p, &[1], 6).unwrap(), vec![2; 6]);
        assert_eq!(m.generate(&p, &[1], 6).unwrap(), m.generate(&p, &[1], 6).unwrap());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn uniform_head_nll() {
        let m = vocab(4).model();
        let ex = Example::new(vec![1, 2], vec![3, 1]).unwrap();
        let nll = m.sequence_nll(&params(Matrix::zeros(4, 8)), &ex).unwrap();
        assert!((nll - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_step_lowers_nll() {
        let m = vocab(5).model();
        let w = Matrix::from_fn(5, 10, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let ex = Example::new(vec![1, 4], vec![2, 3, 3]).unwrap();
        let (nll, g) = m.nll_and_head_gradient(&w, &ex).unwrap();
        let after = m.nll_with_head(&(&w - &g * 1e-3), &ex).unwrap();
        assert!(nll > 0.0);
        assert!(after < nll);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_adapter_is_zero() {
        let v = vocab(6);
        let m = v.model();
        let base = params(Matrix::zeros(6, 12));
        let hist = vec![Example::new(vec![1, 2], vec![3]).unwrap()];
        let hyper = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let d = m.train_user_adapter(&base, &hist, &hyper).unwrap();
        assert_eq!(d.materialize(LM_HEAD).unwrap(), Matrix::zeros(6, 12));
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let v = vocab(6);
        let m = v.model();
        let base = params(Matrix::from_fn(6, 12, |i, j| ((i + 2 * j) % 3) as f64 * 0.1));
        let hist = vec![
            Example::new(vec![1, 2], vec![3, 4]).unwrap(),
            Example::new(vec![5], vec![5, 1, 2]).unwrap(),
        ];
        let hyper = TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        };
        let d1 = m.train_user_adapter(&base, &hist, &hyper).unwrap();
        let d2 = m.train_user_adapter(&base, &hist, &hyper).unwrap();
        assert_eq!(d1, d2);
        let before = m.mean_nll_at(base.site(LM_HEAD).unwrap(), &hist).unwrap();
        let tuned = apply_delta(&base, &d1).unwrap();
        let after = m.mean_nll_at(tuned.site(LM_HEAD).unwrap(), &hist).unwrap();
        assert!(after <= before + 1e-9);
        assert!(after < before);
    }

    #[test]
    fn empty_history_rejected() {
        let m = vocab(4).model();
        let base = params(Matrix::zeros(4, 8));
        assert!(matches!(
            m.train_user_adapter(&base, &[], &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = vocab(5);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("<end>\n"));
        assert_eq!(Vocab::read(buf.as_slice()).unwrap(), v);
        assert!(Vocab::new(vec!["a".into(), "a".into()], 0).is_err());
    }
}
