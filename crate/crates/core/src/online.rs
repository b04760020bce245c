//! Streaming softmax state for one query row.

/// Running max logit `m`, normalizer `l` and value accumulator `acc`.
///
/// After folding any set of `(score, value)` pairs, `acc / l` is the softmax
/// weighted mean of the values and `m` their maximum score.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmax {
    pub m: f64,
    pub l: f64,
    pub acc: Vec<f64>,
}

impl OnlineSoftmax {
    pub fn new(d: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            l: 0.0,
            acc: vec![0.0; d],
        }
    }

    pub fn from_parts(m: f64, l: f64, acc: Vec<f64>) -> Self {
        Self { m, l, acc }
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0.0
    }

    /// Folds one chunk of finite scores and their value rows.
    pub fn fold<'a>(&mut self, scores: &[f64], values: impl IntoIterator<Item = &'a [f32]>) {
        let Some(chunk_max) = scores.iter().copied().reduce(f64::max) else {
            return;
        };
        let m_new = self.m.max(chunk_max);
        let alpha = (self.m - m_new).exp();
        self.l *= alpha;
        self.acc.iter_mut().for_each(|a| *a *= alpha);
        let mut values = values.into_iter();
        for &s in scores {
            let p = (s - m_new).exp();
            let v = values.next().expect("one value row per score");
            self.l += p;
            for (a, &x) in self.acc.iter_mut().zip(v) {
                *a += p * f64::from(x);
            }
        }
        self.m = m_new;
    }

    /// Combines two partial states over disjoint position sets.
    pub fn merge(&mut self, other: &OnlineSoftmax) {
        if other.is_empty() {
            return;
        }
        if self.is_empty() {
            *self = other.clone();
            return;
        }
        let m_new = self.m.max(other.m);
        let a = (self.m - m_new).exp();
        let b = (other.m - m_new).exp();
        self.l = self.l * a + other.l * b;
        for (x, &y) in self.acc.iter_mut().zip(&other.acc) {
            *x = *x * a + y * b;
        }
        self.m = m_new;
    }

    pub fn finish(&self) -> Vec<f64> {
        self.acc.iter().map(|a| a / self.l).collect()
    }
}
