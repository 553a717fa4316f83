//! Featurized bigram generator.
//!
//! Next-token logits are `U[prev] + mean_{w in input} V[w]`: a previous-token
//! transition matrix plus the average of per-input-token rows, so the output
//! distribution depends on both the decoded prefix and the input bag.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::vocab::{Vocab, BOS, EOS, UNK};
use super::{CondSeqModel, Hypothesis, WeightedPair};
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Fbg<S: Scalar = f64> {
    vocab: Vocab,
    /// `|V| x |V|`, row = previous token.
    prev: Vec<S>,
    /// `|V| x |V|`, row = input token.
    bag: Vec<S>,
    moments: Moments<S>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<S> {
    step: u64,
    prev_m: Vec<S>,
    prev_v: Vec<S>,
    bag_m: Vec<S>,
    bag_v: Vec<S>,
}

impl<S: Scalar> Moments<S> {
    fn zeros(n: usize) -> Self {
        Self {
            step: 0,
            prev_m: vec![S::zero(); n],
            prev_v: vec![S::zero(); n],
            bag_m: vec![S::zero(); n],
            bag_v: vec![S::zero(); n],
        }
    }
}

/// Row-sparse gradient: only rows touched by the batch are stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FbgGradient<S> {
    pub prev: BTreeMap<u32, Vec<S>>,
    pub bag: BTreeMap<u32, Vec<S>>,
}

impl<S: Scalar> FbgGradient<S> {
    /// Flattened `[prev..., bag...]`, matching [`Fbg::parameters`].
    pub fn to_dense(&self, vocab_size: usize) -> Vec<S> {
        let n = vocab_size;
        let mut out = vec![S::zero(); 2 * n * n];
        for (offset, rows) in [(0, &self.prev), (n * n, &self.bag)] {
            for (&r, row) in rows {
                let start = offset + r as usize * n;
                out[start..start + n].copy_from_slice(row);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty() && self.bag.is_empty()
    }
}

fn add_row<S: Scalar>(rows: &mut BTreeMap<u32, Vec<S>>, r: u32, scale: S, g: &[S]) {
    let row = rows.entry(r).or_insert_with(|| vec![S::zero(); g.len()]);
    for (a, &b) in row.iter_mut().zip(g) {
        *a += scale * b;
    }
}

impl<S: Scalar> Fbg<S> {
    /// Zero-initialized model: every next-token distribution is uniform.
    pub fn zeros(vocab: Vocab) -> Self {
        let n = vocab.len() * vocab.len();
        Self {
            vocab,
            prev: vec![S::zero(); n],
            bag: vec![S::zero(); n],
            moments: Moments::zeros(n),
        }
    }

    pub fn from_parts(vocab: Vocab, prev: Vec<S>, bag: Vec<S>) -> Result<Self> {
        let n = vocab.len() * vocab.len();
        if prev.len() != n || bag.len() != n {
            return Err(Error::InvalidArgument(format!(
                "parameter matrices must have {n} entries"
            )));
        }
        Ok(Self {
            vocab,
            prev,
            bag,
            moments: Moments::zeros(n),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn size(&self) -> usize {
        self.vocab.len()
    }

    /// `2 |V|^2` parameters, transition matrix first.
    pub fn num_parameters(&self) -> usize {
        self.prev.len() + self.bag.len()
    }

    pub fn parameters(&self) -> impl Iterator<Item = S> + '_ {
        self.prev.iter().chain(self.bag.iter()).copied()
    }

    pub fn parameter_mut(&mut self, i: usize) -> &mut S {
        let n = self.prev.len();
        if i < n {
            &mut self.prev[i]
        } else {
            &mut self.bag[i - n]
        }
    }

    pub fn prev_row_mut(&mut self, r: u32) -> &mut [S] {
        let n = self.size();
        &mut self.prev[r as usize * n..(r as usize + 1) * n]
    }

    pub fn bag_row_mut(&mut self, r: u32) -> &mut [S] {
        let n = self.size();
        &mut self.bag[r as usize * n..(r as usize + 1) * n]
    }

    /// Input token ids with their mean-pooling weights. An empty input is the
    /// bag `{UNK}`.
    fn bag_weights(&self, input: &TokenSeq) -> Vec<(u32, S)> {
        if input.is_empty() {
            return vec![(UNK, S::one())];
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for id in self.vocab.encode(input) {
            *counts.entry(id).or_default() += 1;
        }
        let len = S::from_count(input.len());
        counts
            .into_iter()
            .map(|(id, c)| (id, S::from_count(c) / len))
            .collect()
    }

    fn bag_logits(&self, bag: &[(u32, S)]) -> Vec<S> {
        let n = self.size();
        let mut out = vec![S::zero(); n];
        for &(w, c) in bag {
            let row = &self.bag[w as usize * n..(w as usize + 1) * n];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += c * v;
            }
        }
        out
    }

    /// Log-softmax of the next-token logits after `prev`.
    fn next_log_probs(&self, prev: u32, bag_logits: &[S], out: &mut Vec<S>) {
        let n = self.size();
        let row = &self.prev[prev as usize * n..(prev as usize + 1) * n];
        out.clear();
        out.extend(row.iter().zip(bag_logits).map(|(&u, &b)| u + b));
        let lse = log_sum_exp(out);
        for x in out.iter_mut() {
            *x -= lse;
        }
    }

    fn target_ids(&self, output: &TokenSeq) -> Vec<u32> {
        let mut ids = self.vocab.encode(output);
        ids.push(EOS);
        ids
    }

    fn accumulate(&self, pair: &WeightedPair<S>, grad: &mut FbgGradient<S>) -> Result<()> {
        if !pair.weight.is_finite() {
            return Err(Error::NonFiniteGradient(pair.id.clone()));
        }
        if pair.weight == S::zero() {
            return Ok(());
        }
        let bag = self.bag_weights(&pair.input);
        let bl = self.bag_logits(&bag);
        let n = self.size();
        let mut lp = Vec::with_capacity(n);
        let mut dlogits = vec![S::zero(); n];
        let mut total = vec![S::zero(); n];
        let mut prev = BOS;
        for y in self.target_ids(&pair.output) {
            self.next_log_probs(prev, &bl, &mut lp);
            for (d, &l) in dlogits.iter_mut().zip(&lp) {
                *d = pair.weight * l.exp();
            }
            dlogits[y as usize] -= pair.weight;
            if dlogits.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(pair.id.clone()));
            }
            add_row(&mut grad.prev, prev, S::one(), &dlogits);
            for (t, &d) in total.iter_mut().zip(&dlogits) {
                *t += d;
            }
            prev = y;
        }
        for (w, c) in bag {
            add_row(&mut grad.bag, w, c, &total);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, rng_seed: u64) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(&self.to_checkpoint(rng_seed))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }

    pub fn to_checkpoint(&self, rng_seed: u64) -> Checkpoint {
        let f = |v: &[S]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let n = self.size();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: self.vocab.tokens().to_vec(),
            shapes: Shapes {
                prev: [n, n],
                bag: [n, n],
            },
            params: Params {
                prev: f(&self.prev),
                bag: f(&self.bag),
            },
            optimizer: OptimizerMoments {
                step: self.moments.step,
                prev_m: f(&self.moments.prev_m),
                prev_v: f(&self.moments.prev_v),
                bag_m: f(&self.moments.bag_m),
                bag_v: f(&self.moments.bag_v),
            },
            rng_seed,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, u64)> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::MalformedCheckpoint(format!("unsupported version {}", ck.version)));
        }
        let vocab = Vocab::from_tokens(ck.vocab)?;
        let n = vocab.len();
        if ck.shapes.prev != [n, n] || ck.shapes.bag != [n, n] {
            return Err(Error::MalformedCheckpoint("shape does not match vocabulary".into()));
        }
        let conv = |v: Vec<f64>, name: &str| -> Result<Vec<S>> {
            if v.len() != n * n {
                return Err(Error::MalformedCheckpoint(format!("`{name}` has {} entries", v.len())));
            }
            Ok(v.into_iter().map(S::lit).collect())
        };
        let model = Self {
            prev: conv(ck.params.prev, "params.prev")?,
            bag: conv(ck.params.bag, "params.bag")?,
            moments: Moments {
                step: ck.optimizer.step,
                prev_m: conv(ck.optimizer.prev_m, "optimizer.prev_m")?,
                prev_v: conv(ck.optimizer.prev_v, "optimizer.prev_v")?,
                bag_m: conv(ck.optimizer.bag_m, "optimizer.bag_m")?,
                bag_v: conv(ck.optimizer.bag_v, "optimizer.bag_v")?,
            },
            vocab,
        };
        Ok((model, ck.rng_seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab: Vec<String>,
    pub shapes: Shapes,
    pub params: Params,
    pub optimizer: OptimizerMoments,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub prev: [usize; 2],
    pub bag: [usize; 2],
}

/// Row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub prev: Vec<f64>,
    pub bag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMoments {
    pub step: u64,
    pub prev_m: Vec<f64>,
    pub prev_v: Vec<f64>,
    pub bag_m: Vec<f64>,
    pub bag_v: Vec<f64>,
}

fn adamw_rows<S: Scalar>(
    params: &mut [S],
    m: &mut [S],
    v: &mut [S],
    rows: &BTreeMap<u32, Vec<S>>,
    n: usize,
    k: &StepConsts<S>,
) {
    for (&r, g) in rows {
        let start = r as usize * n;
        for (j, &gj) in g.iter().enumerate().take(n) {
            let i = start + j;
            m[i] = k.b1 * m[i] + (S::one() - k.b1) * gj;
            v[i] = k.b2 * v[i] + (S::one() - k.b2) * gj * gj;
            let m_hat = m[i] / k.bc1;
            let v_hat = v[i] / k.bc2;
            params[i] -= k.lr * (m_hat / (v_hat.sqrt() + k.eps) + k.wd * params[i]);
        }
    }
}

struct StepConsts<S> {
    lr: S,
    b1: S,
    b2: S,
    eps: S,
    wd: S,
    bc1: S,
    bc2: S,
}

type Beam<S> = (Vec<u32>, S);

fn better<S: Scalar>(a: &Beam<S>, b: &Beam<S>) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

fn cmp_finished<S: Scalar>(a: &(Vec<u32>, S, bool), b: &(Vec<u32>, S, bool)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

impl<S: Scalar> CondSeqModel<S> for Fbg<S> {
    type Gradient = FbgGradient<S>;

    fn log_prob(&self, input: &TokenSeq, output: &TokenSeq) -> S {
        let bl = self.bag_logits(&self.bag_weights(input));
        let mut lp = Vec::with_capacity(self.size());
        let mut prev = BOS;
        let mut total = S::zero();
        for y in self.target_ids(output) {
            self.next_log_probs(prev, &bl, &mut lp);
            total += lp[y as usize];
            prev = y;
        }
        total
    }

    /// Beam search over summed log-probabilities without length
    /// normalization. BOS and UNK are never emitted.
    fn beam_search(&self, input: &TokenSeq, beam_size: usize, max_len: usize) -> Vec<Hypothesis<S>> {
        if beam_size == 0 || max_len == 0 {
            return Vec::new();
        }
        let bl = self.bag_logits(&self.bag_weights(input));
        let n = self.size() as u32;
        let mut lp = Vec::with_capacity(n as usize);
        let mut live: Vec<Beam<S>> = vec![(Vec::new(), S::zero())];
        let mut finished: Vec<(Vec<u32>, S, bool)> = Vec::new();
        for step in 0..max_len {
            let mut grown: Vec<Beam<S>> = Vec::with_capacity(live.len() * n as usize);
            for (seq, score) in &live {
                self.next_log_probs(*seq.last().unwrap_or(&BOS), &bl, &mut lp);
                for t in (EOS..n).filter(|&t| t != UNK) {
                    let mut s = seq.clone();
                    s.push(t);
                    grown.push((s, *score + lp[t as usize]));
                }
            }
            if step + 1 == max_len {
                // Length limit: every extension terminates, scored with the
                // EOS it would need so totals agree with `log_prob`.
                for (s, l) in grown {
                    if s.last() == Some(&EOS) {
                        let mut s = s;
                        s.pop();
                        finished.push((s, l, true));
                    } else {
                        self.next_log_probs(*s.last().unwrap(), &bl, &mut lp);
                        let l = l + lp[EOS as usize];
                        finished.push((s, l, false));
                    }
                }
                break;
            }
            grown.sort_by(better);
            let mut next = Vec::with_capacity(beam_size);
            for (mut s, l) in grown {
                if s.last() == Some(&EOS) {
                    s.pop();
                    finished.push((s, l, true));
                } else if next.len() < beam_size {
                    next.push((s, l));
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
            // Extensions only lower the score, so stop once no live prefix can
            // enter the finished top-k.
            if finished.len() >= beam_size {
                finished.sort_by(|a, b| cmp_finished(a, b));
                if live[0].1 < finished[beam_size - 1].1 {
                    break;
                }
            }
        }
        finished.sort_by(cmp_finished);
        finished.truncate(beam_size);
        finished
            .into_iter()
            .map(|(ids, log_prob, ended)| Hypothesis {
                tokens: self.vocab.decode(&ids),
                log_prob,
                ended,
            })
            .collect()
    }

    fn gradient(&self, batch: &[WeightedPair<S>]) -> Result<FbgGradient<S>> {
        let mut grad = FbgGradient::default();
        for pair in batch {
            self.accumulate(pair, &mut grad)?;
        }
        Ok(grad)
    }

    /// Lazy AdamW: only rows present in `grad` are updated, including their
    /// weight decay, so an all-zero-weight batch leaves parameters unchanged.
    fn step(&mut self, grad: &FbgGradient<S>, opt: &AdamW, lr: f64) {
        if grad.is_empty() {
            return;
        }
        self.moments.step += 1;
        let t = self.moments.step as i32;
        let k = StepConsts {
            lr: S::lit(lr),
            b1: S::lit(opt.beta1),
            b2: S::lit(opt.beta2),
            eps: S::lit(opt.eps),
            wd: S::lit(opt.weight_decay),
            bc1: S::one() - S::lit(opt.beta1).powi(t),
            bc2: S::one() - S::lit(opt.beta2).powi(t),
        };
        let n = self.size();
        let Moments {
            prev_m,
            prev_v,
            bag_m,
            bag_v,
            ..
        } = &mut self.moments;
        adamw_rows(&mut self.prev, prev_m, prev_v, &grad.prev, n, &k);
        adamw_rows(&mut self.bag, bag_m, bag_v, &grad.bag, n, &k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(s: &str) -> TokenSeq {
        tokenize(s)
    }

    fn random_model(real: &[&str], scale: f64, seed: u64) -> Fbg<f64> {
        let vocab = Vocab::build(real.iter().copied());
        let n = vocab.len() * vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let bag = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Fbg::from_parts(vocab, prev, bag).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Fbg::<f64>::zeros(Vocab::build(["a", "b", "c"]));
        let ln_v = (m.size() as f64).ln();
        for (out, len) in [("", 1), ("a", 2), ("c b a", 4)] {
            let lp = m.log_prob(&seq("a b"), &seq(out));
            assert!((lp + len as f64 * ln_v).abs() < 1e-12);
        }
    }

    /// Every output over the emitted alphabet with at most `max_len` tokens
    /// including EOS.
    fn enumerate(alphabet: &[&'static str], max_len: usize) -> Vec<Vec<&'static str>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 1..max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for &a in alphabet {
                    let mut q: Vec<&str> = p.clone();
                    q.push(a);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn total_mass_at_most_one() {
        let m = random_model(&["a", "b", "c"], 2.0, 3);
        let input = seq("b c c");
        let total: f64 = enumerate(&["<unk>", "a", "b", "c"], 3)
            .iter()
            .map(|o| {
                let ts = TokenSeq::from_normalized(o.iter().map(|s| s.to_string()).collect());
                m.log_prob(&input, &ts).exp()
            })
            .sum();
        assert!(total <= 1.0 + 1e-9, "{total}");
        assert!(total > 0.0);
    }

    #[test]
    fn hand_set_fixture() {
        // Vocab <s> </s> <unk> a; only the {</s>, a} block of U and row a of V
        // are non-zero.
        let vocab = Vocab::build(["a"]);
        let mut m = Fbg::<f64>::zeros(vocab);
        m.prev_row_mut(BOS)[3] = 1.0; // <s> -> a
        m.prev_row_mut(3)[1] = 2.0; // a -> </s>
        m.bag_row_mut(3)[3] = 0.5;
        // Input "a a": bag mean = row a.
        // Step 1 logits [0, 0, 0, 1.5]; step 2 logits [0, 2, 0, 0.5].
        let lse1 = (3.0 + 1.5f64.exp()).ln();
        let lse2 = (2.0 + 2.0f64.exp() + 0.5f64.exp()).ln();
        let expected = (1.5 - lse1) + (2.0 - lse2);
        let got = m.log_prob(&seq("a a"), &seq("a"));
        assert!((got - expected).abs() < 1e-12);
        // Empty input uses the UNK row, which is zero here.
        let lse1 = (3.0 + 1.0f64.exp()).ln();
        let lse2 = (2.0 + 2.0f64.exp() + 1.0).ln();
        let got = m.log_prob(&seq(""), &seq("a"));
        assert!((got - ((1.0 - lse1) + (2.0 - lse2))).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_on_zero_model() {
        let m = Fbg::<f64>::zeros(Vocab::build(["a"]));
        let pair = WeightedPair {
            id: "x".into(),
            input: seq("a"),
            output: seq("a"),
            weight: 1.0,
        };
        let g = m.gradient(&[pair]).unwrap();
        // d(-log p)/d logits = p - onehot, p uniform = 1/4.
        assert_eq!(g.prev[&BOS], vec![0.25, 0.25, 0.25, -0.75]);
        assert_eq!(g.prev[&3], vec![0.25, -0.75, 0.25, 0.25]);
        // Bag row a: weight 1 (single token), sum over both positions.
        assert_eq!(g.bag[&3], vec![0.5, -0.5, 0.5, -0.5]);
        assert_eq!(g.prev.len(), 2);
    }

    fn nll(m: &Fbg<f64>, batch: &[WeightedPair<f64>]) -> f64 {
        batch.iter().map(|p| -p.weight * m.log_prob(&p.input, &p.output)).sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = random_model(&["a", "b", "c"], 1.0, 11);
        let batch = vec![
            WeightedPair {
                id: "1".into(),
                input: seq("a b b"),
                output: seq("c a"),
                weight: 0.7,
            },
            WeightedPair {
                id: "2".into(),
                input: seq("c zzz"),
                output: seq("b"),
                weight: -0.3,
            },
        ];
        let g = m.gradient(&batch).unwrap().to_dense(m.size());
        let h = 1e-5;
        for i in 0..m.num_parameters() {
            let orig = *m.parameter_mut(i);
            *m.parameter_mut(i) = orig + h;
            let up = nll(&m, &batch);
            *m.parameter_mut(i) = orig - h;
            let down = nll(&m, &batch);
            *m.parameter_mut(i) = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn non_finite_weight_is_reported() {
        let m = Fbg::<f64>::zeros(Vocab::build(["a"]));
        let pair = WeightedPair {
            id: "bad-one".into(),
            input: seq("a"),
            output: seq("a"),
            weight: f64::NAN,
        };
        let err = m.gradient(&[pair]).unwrap_err();
        assert!(err.to_string().contains("bad-one"));
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut m = random_model(&["a", "b"], 1.0, 5);
        let before = m.clone();
        let pair = WeightedPair {
            id: "z".into(),
            input: seq("a"),
            output: seq("b"),
            weight: 0.0,
        };
        m.apply_gradients(&[pair], &AdamW::default(), 0.05).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn small_step_decreases_nll() {
        let mut m = random_model(&["a", "b", "c"], 1.0, 9);
        let pair = WeightedPair {
            id: "p".into(),
            input: seq("a c"),
            output: seq("b b"),
            weight: 1.0,
        };
        let before = -m.log_prob(&pair.input, &pair.output);
        m.apply_gradients(std::slice::from_ref(&pair), &AdamW::default(), 1e-3).unwrap();
        assert!(-m.log_prob(&pair.input, &pair.output) < before);
    }

    /// Beam 1 follows the greedy non-EOS path, returns the best finished
    /// hypothesis along it, and never scores below plain greedy decoding.
    #[test]
    fn beam_one_follows_greedy_path() {
        for seed in 0..30 {
            let m = random_model(&["a", "b", "c"], 2.0, seed);
            let input = seq("a b");
            let best = &m.beam_search(&input, 1, 5)[0];
            let bl = m.bag_logits(&m.bag_weights(&input));
            let mut lp = Vec::new();
            let (mut prev, mut path) = (BOS, Vec::new());
            let (mut greedy, mut greedy_done) = (0.0, false);
            for _ in 0..5 {
                m.next_log_probs(prev, &bl, &mut lp);
                let argmax = |skip_eos: bool| {
                    (EOS..m.size() as u32)
                        .filter(|&t| t != UNK && !(skip_eos && t == EOS))
                        .fold(None, |acc: Option<u32>, t| match acc {
                            Some(b) if lp[b as usize] >= lp[t as usize] => Some(b),
                            _ => Some(t),
                        })
                        .unwrap()
                };
                if !greedy_done {
                    let t = argmax(false);
                    greedy += lp[t as usize];
                    greedy_done = t == EOS;
                }
                let t = argmax(true);
                path.push(t);
                prev = t;
            }
            if !greedy_done {
                m.next_log_probs(prev, &bl, &mut lp);
                greedy += lp[EOS as usize];
            }
            // The last token at the length limit is chosen by its total score.
            let ids = m.vocab.encode(&best.tokens);
            let fixed = ids.len().min(4);
            assert_eq!(ids[..fixed], path[..fixed], "seed {seed}");
            assert!(best.log_prob >= greedy - 1e-12);
        }
    }

    /// Every output of at most `max_len` tokens over `real`, best first.
    fn exhaustive(m: &Fbg<f64>, real: &[&'static str], input: &TokenSeq, max_len: usize) -> Vec<(Vec<u32>, f64)> {
        let mut all: Vec<(Vec<u32>, f64)> = enumerate(real, max_len + 1)
            .into_iter()
            .map(|out| {
                let ts = TokenSeq::from_normalized(out.iter().map(|s| s.to_string()).collect());
                (m.vocab.encode(&ts), m.log_prob(input, &ts))
            })
            .collect();
        all.sort_by(better);
        all
    }

    /// With two real tokens and beam 4 no prefix is ever pruned before the
    /// last step, so the search is exact.
    #[test]
    fn beam_matches_exhaustive_when_nothing_is_pruned() {
        for seed in 0..200 {
            let m = random_model(&["a", "b"], 2.0, seed);
            let input = seq("a");
            let got = m.beam_search(&input, 4, 3);
            let all = exhaustive(&m, &["a", "b"], &input, 3);
            assert_eq!(got.len(), 4);
            for (h, (ids, lp)) in got.iter().zip(&all) {
                assert_eq!(h.tokens, m.vocab.decode(ids), "seed {seed}");
                assert!((h.log_prob - lp).abs() < 1e-12);
            }
        }
    }

    /// With pruning the search is a lower bound: hypotheses are genuine
    /// outputs with their exact scores, and the i-th never beats the true i-th.
    #[test]
    fn pruned_beam_is_bounded_by_exhaustive() {
        for seed in 0..200 {
            let m = random_model(&["a", "b", "c"], 2.0, seed);
            let input = seq("a");
            let got = m.beam_search(&input, 4, 3);
            let all = exhaustive(&m, &["a", "b", "c"], &input, 3);
            assert_eq!(got.len(), 4);
            assert!(got.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            for (h, (_, best_lp)) in got.iter().zip(&all) {
                assert!((h.log_prob - m.log_prob(&input, &h.tokens)).abs() < 1e-12);
                assert!(h.log_prob <= best_lp + 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_model_prefers_short_outputs_in_token_order() {
        let m = Fbg::<f64>::zeros(Vocab::build(["b", "a", "c"]));
        let got = m.beam_search(&seq("x"), 4, 128);
        let texts: Vec<String> = got.iter().map(|h| h.tokens.join()).collect();
        assert_eq!(texts, ["", "a", "b", "c"]);
        assert!(got.iter().all(|h| h.ended));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut m = random_model(&["a", "b", "c"], 1.5, 2);
        let pair = WeightedPair {
            id: "p".into(),
            input: seq("a"),
            output: seq("c"),
            weight: 1.0,
        };
        m.apply_gradients(&[pair], &AdamW::default(), 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        m.save(&path, 42).unwrap();
        let (back, seed) = Fbg::<f64>::load(&path).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back, m);
        let lp = m.log_prob(&seq("b a"), &seq("a c"));
        assert_eq!(back.log_prob(&seq("b a"), &seq("a c")).to_bits(), lp.to_bits());
    }

    #[test]
    fn f32_model_agrees_with_f64() {
        let m64 = random_model(&["a", "b"], 1.0, 8);
        let ck = m64.to_checkpoint(0);
        let (m32, _) = Fbg::<f32>::from_checkpoint(ck).unwrap();
        let a = m64.log_prob(&seq("a b"), &seq("b"));
        let b = m32.log_prob(&seq("a b"), &seq("b"));
        assert!((a - f64::from(b)).abs() < 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn scores_are_normalized_and_beams_consistent(
                seed in any::<u64>(),
                scale in 0.1..3.0f64,
                input in "[abc ]{0,8}",
                beam in 1usize..5,
            ) {
                let m = random_model(&["a", "b", "c"], scale, seed);
                let input = seq(&input);
                let total: f64 = enumerate(&["<unk>", "a", "b", "c"], 3)
                    .iter()
                    .map(|o| {
                        let ts = TokenSeq::from_normalized(o.iter().map(|s| s.to_string()).collect());
                        let lp = m.log_prob(&input, &ts);
                        assert!(lp <= 0.0);
                        lp.exp()
                    })
                    .sum();
                prop_assert!(total <= 1.0 + 1e-9);
                let hyps = m.beam_search(&input, beam, 4);
                prop_assert!(!hyps.is_empty() && hyps.len() <= beam);
                for w in hyps.windows(2) {
                    prop_assert!(w[0].log_prob >= w[1].log_prob);
                }
                for h in &hyps {
                    prop_assert!((h.log_prob - m.log_prob(&input, &h.tokens)).abs() < 1e-9);
                    prop_assert!(h.tokens.len() <= 4);
                }
            }
        }
    }
}
