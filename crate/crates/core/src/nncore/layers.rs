use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{add_assign, dot, matvec_add, matvec_t_add, outer_add, sigmoid, softmax_in_place};
use super::{Gradients, NnError, ParamId, ParameterSet};

/// Affine map `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut ParameterSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = p.add_uniform(&format!("{name}.w"), &[out_dim, in_dim], rng);
        let b = p.add_uniform(&format!("{name}.b"), &[out_dim], rng);
        Linear { w, b, in_dim, out_dim }
    }

    /// Re-binds to parameters already present in `p`.
    pub fn bind(p: &ParameterSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: p.id(&format!("{name}.w")).expect("bound parameter exists"),
            b: p.id(&format!("{name}.b")).expect("bound parameter exists"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &ParameterSet, x: &[f64]) -> Vec<f64> {
        let mut y = p.get(self.b).data().to_vec();
        matvec_add(p.get(self.w).data(), self.in_dim, x, &mut y);
        y
    }

    /// Accumulates parameter gradients and adds `Wᵀ dy` into `dx`.
    pub fn backward_into(&self, p: &ParameterSet, x: &[f64], dy: &[f64], g: &mut Gradients, dx: &mut [f64]) {
        outer_add(g.get_mut(self.w).data_mut(), self.in_dim, dy, x);
        add_assign(g.get_mut(self.b).data_mut(), dy);
        matvec_t_add(p.get(self.w).data(), self.in_dim, dy, dx);
    }

    pub fn backward(&self, p: &ParameterSet, x: &[f64], dy: &[f64], g: &mut Gradients) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        self.backward_into(p, x, dy, g, &mut dx);
        dx
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn backward_params(&self, x: &[f64], dy: &[f64], g: &mut Gradients) {
        outer_add(g.get_mut(self.w).data_mut(), self.in_dim, dy, x);
        add_assign(g.get_mut(self.b).data_mut(), dy);
    }
}

/// Lookup table of `rows` vectors of size `dim`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(p: &mut ParameterSet, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = p.add_uniform(name, &[rows, dim], rng);
        Embedding { table, rows, dim }
    }

    pub fn bind(p: &ParameterSet, name: &str, rows: usize, dim: usize) -> Self {
        Embedding { table: p.id(name).expect("bound parameter exists"), rows, dim }
    }

    pub fn row<'a>(&self, p: &'a ParameterSet, id: usize) -> &'a [f64] {
        p.get(self.table).row(id)
    }

    pub fn lookup(&self, p: &ParameterSet, ids: &[usize]) -> Vec<Vec<f64>> {
        ids.iter().map(|&i| self.row(p, i).to_vec()).collect()
    }

    pub fn backward(&self, ids: &[usize], d_rows: &[Vec<f64>], g: &mut Gradients) {
        let grad = g.get_mut(self.table);
        for (&i, d) in ids.iter().zip(d_rows) {
            add_assign(grad.row_mut(i), d);
        }
    }

    pub fn backward_row(&self, id: usize, d: &[f64], g: &mut Gradients) {
        add_assign(g.get_mut(self.table).row_mut(id), d);
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// n  = tanh(Wn x + r ⊙ (Un h) + bn)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    uh_n: Vec<f64>,
}

impl GruCell {
    pub fn new<R: Rng>(p: &mut ParameterSet, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = p.add_uniform(&format!("{name}.w_x"), &[3 * hidden, input_dim], rng);
        let w_h = p.add_uniform(&format!("{name}.w_h"), &[3 * hidden, hidden], rng);
        let b = p.add_uniform(&format!("{name}.b"), &[3 * hidden], rng);
        GruCell { w_x, w_h, b, input_dim, hidden }
    }

    pub fn bind(p: &ParameterSet, name: &str, input_dim: usize, hidden: usize) -> Self {
        let id = |s: &str| p.id(&format!("{name}.{s}")).expect("bound parameter exists");
        GruCell { w_x: id("w_x"), w_h: id("w_h"), b: id("b"), input_dim, hidden }
    }

    pub fn step(&self, p: &ParameterSet, x: &[f64], h: &[f64]) -> (Vec<f64>, GruCache) {
        let hd = self.hidden;
        let mut gx = p.get(self.b).data().to_vec();
        matvec_add(p.get(self.w_x).data(), self.input_dim, x, &mut gx);
        let mut gh = vec![0.0; 3 * hd];
        matvec_add(p.get(self.w_h).data(), hd, h, &mut gh);

        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut h_new = vec![0.0; hd];
        for i in 0..hd {
            z[i] = sigmoid(gx[i] + gh[i]);
            r[i] = sigmoid(gx[hd + i] + gh[hd + i]);
            n[i] = (gx[2 * hd + i] + r[i] * gh[2 * hd + i]).tanh();
            h_new[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
        }
        let cache = GruCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            z,
            r,
            n,
            uh_n: gh[2 * hd..].to_vec(),
        };
        (h_new, cache)
    }

    /// Returns `(dx, dh_prev)` for an upstream gradient on the new state.
    pub fn backward(&self, p: &ParameterSet, c: &GruCache, dh: &[f64], g: &mut Gradients) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let mut dgx = vec![0.0; 3 * hd];
        let mut dgh = vec![0.0; 3 * hd];
        let mut dh_prev = vec![0.0; hd];
        for i in 0..hd {
            let (z, r, n) = (c.z[i], c.r[i], c.n[i]);
            let dz_pre = dh[i] * (c.h_prev[i] - n) * z * (1.0 - z);
            let dn_pre = dh[i] * (1.0 - z) * (1.0 - n * n);
            let dr_pre = dn_pre * c.uh_n[i] * r * (1.0 - r);
            dgx[i] = dz_pre;
            dgx[hd + i] = dr_pre;
            dgx[2 * hd + i] = dn_pre;
            dgh[i] = dz_pre;
            dgh[hd + i] = dr_pre;
            dgh[2 * hd + i] = dn_pre * r;
            dh_prev[i] = dh[i] * z;
        }
        add_assign(g.get_mut(self.b).data_mut(), &dgx);
        outer_add(g.get_mut(self.w_x).data_mut(), self.input_dim, &dgx, &c.x);
        outer_add(g.get_mut(self.w_h).data_mut(), hd, &dgh, &c.h_prev);
        let mut dx = vec![0.0; self.input_dim];
        matvec_t_add(p.get(self.w_x).data(), self.input_dim, &dgx, &mut dx);
        matvec_t_add(p.get(self.w_h).data(), hd, &dgh, &mut dh_prev);
        (dx, dh_prev)
    }
}

/// Forward and backward GRUs over the same sequence.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub hidden: usize,
}

/// Everything a bidirectional pass needs for backpropagation.
#[derive(Debug, Clone)]
pub struct BiGruRun {
    fwd_cache: Vec<GruCache>,
    bwd_cache: Vec<GruCache>,
    /// Forward state after reading position `t`.
    pub fwd_states: Vec<Vec<f64>>,
    /// Backward state after reading position `t` (coming from the end).
    pub bwd_states: Vec<Vec<f64>>,
}

impl BiGruRun {
    pub fn len(&self) -> usize {
        self.fwd_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd_states.is_empty()
    }

    /// `[forward_t ; backward_t]` for every position.
    pub fn position_states(&self) -> Vec<Vec<f64>> {
        self.fwd_states
            .iter()
            .zip(&self.bwd_states)
            .map(|(f, b)| f.iter().chain(b).copied().collect())
            .collect()
    }

    /// Final forward state concatenated with final backward state.
    pub fn final_state(&self) -> Vec<f64> {
        let last = self.fwd_states.last().expect("non-empty run");
        last.iter().chain(&self.bwd_states[0]).copied().collect()
    }
}

impl BiGru {
    pub fn new<R: Rng>(p: &mut ParameterSet, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        BiGru {
            fwd: GruCell::new(p, &format!("{name}.fwd"), input_dim, hidden, rng),
            bwd: GruCell::new(p, &format!("{name}.bwd"), input_dim, hidden, rng),
            hidden,
        }
    }

    pub fn bind(p: &ParameterSet, name: &str, input_dim: usize, hidden: usize) -> Self {
        BiGru {
            fwd: GruCell::bind(p, &format!("{name}.fwd"), input_dim, hidden),
            bwd: GruCell::bind(p, &format!("{name}.bwd"), input_dim, hidden),
            hidden,
        }
    }

    pub fn run(&self, p: &ParameterSet, xs: &[Vec<f64>]) -> Result<BiGruRun, NnError> {
        if xs.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let t_len = xs.len();
        let mut h = vec![0.0; self.hidden];
        let mut fwd_cache = Vec::with_capacity(t_len);
        let mut fwd_states = Vec::with_capacity(t_len);
        for x in xs {
            let (h_new, c) = self.fwd.step(p, x, &h);
            fwd_cache.push(c);
            fwd_states.push(h_new.clone());
            h = h_new;
        }
        let mut h = vec![0.0; self.hidden];
        let mut bwd_cache: Vec<Option<GruCache>> = vec![None; t_len];
        let mut bwd_states = vec![Vec::new(); t_len];
        for t in (0..t_len).rev() {
            let (h_new, c) = self.bwd.step(p, &xs[t], &h);
            bwd_cache[t] = Some(c);
            bwd_states[t] = h_new.clone();
            h = h_new;
        }
        Ok(BiGruRun {
            fwd_cache,
            bwd_cache: bwd_cache.into_iter().map(|c| c.expect("filled")).collect(),
            fwd_states,
            bwd_states,
        })
    }

    /// Backpropagates gradients on per-position states (each `2H`) and on
    /// the final concatenated state. Returns input gradients.
    pub fn backward(
        &self,
        p: &ParameterSet,
        run: &BiGruRun,
        d_positions: Option<&[Vec<f64>]>,
        d_final: Option<&[f64]>,
        g: &mut Gradients,
    ) -> Vec<Vec<f64>> {
        let hd = self.hidden;
        let t_len = run.len();
        let mut dxs = vec![vec![0.0; self.fwd.input_dim]; t_len];

        let mut dh = match d_final {
            Some(d) => d[..hd].to_vec(),
            None => vec![0.0; hd],
        };
        for t in (0..t_len).rev() {
            if let Some(dp) = d_positions {
                add_assign(&mut dh, &dp[t][..hd]);
            }
            let (dx, dh_prev) = self.fwd.backward(p, &run.fwd_cache[t], &dh, g);
            add_assign(&mut dxs[t], &dx);
            dh = dh_prev;
        }

        let mut dh = match d_final {
            Some(d) => d[hd..].to_vec(),
            None => vec![0.0; hd],
        };
        for t in 0..t_len {
            if let Some(dp) = d_positions {
                add_assign(&mut dh, &dp[t][hd..]);
            }
            let (dx, dh_prev) = self.bwd.backward(p, &run.bwd_cache[t], &dh, g);
            add_assign(&mut dxs[t], &dx);
            dh = dh_prev;
        }
        dxs
    }
}

/// Multi-width convolution with tanh, max-over-time pooling and a linear
/// projection of the pooled features.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    pub widths: Vec<usize>,
    pub filters: usize,
    pub input_dim: usize,
    pub convs: Vec<Linear>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct CnnCache {
    /// Input padded with zero vectors up to the widest filter.
    padded: Vec<Vec<f64>>,
    original_len: usize,
    /// Per width: activations at each window position (`positions × filters`).
    acts: Vec<Vec<Vec<f64>>>,
    /// Per width: winning position for each filter.
    argmax: Vec<Vec<usize>>,
    pooled: Vec<f64>,
}

impl CnnCache {
    /// Winning window positions; a change under perturbation marks a kink.
    pub fn branch(&self) -> Vec<usize> {
        self.argmax.iter().flatten().copied().collect()
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

impl CnnEncoder {
    pub fn new<R: Rng>(
        p: &mut ParameterSet,
        name: &str,
        input_dim: usize,
        widths: &[usize],
        filters: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let convs = widths
            .iter()
            .map(|&w| Linear::new(p, &format!("{name}.conv{w}"), w * input_dim, filters, rng))
            .collect();
        let proj = Linear::new(p, &format!("{name}.proj"), widths.len() * filters, out_dim, rng);
        CnnEncoder { widths: widths.to_vec(), filters, input_dim, convs, proj }
    }

    pub fn bind(p: &ParameterSet, name: &str, input_dim: usize, widths: &[usize], filters: usize, out_dim: usize) -> Self {
        let convs = widths
            .iter()
            .map(|&w| Linear::bind(p, &format!("{name}.conv{w}"), w * input_dim, filters))
            .collect();
        let proj = Linear::bind(p, &format!("{name}.proj"), widths.len() * filters, out_dim);
        CnnEncoder { widths: widths.to_vec(), filters, input_dim, convs, proj }
    }

    fn window(padded: &[Vec<f64>], start: usize, width: usize) -> Vec<f64> {
        padded[start..start + width].iter().flatten().copied().collect()
    }

    pub fn encode(&self, p: &ParameterSet, xs: &[Vec<f64>]) -> Result<(Vec<f64>, CnnCache), NnError> {
        if xs.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let max_w = *self.widths.iter().max().expect("at least one width");
        let mut padded = xs.to_vec();
        while padded.len() < max_w {
            padded.push(vec![0.0; self.input_dim]);
        }
        let mut acts = Vec::with_capacity(self.widths.len());
        let mut argmax = Vec::with_capacity(self.widths.len());
        let mut pooled = Vec::with_capacity(self.widths.len() * self.filters);
        for (conv, &w) in self.convs.iter().zip(&self.widths) {
            let positions = padded.len() + 1 - w;
            let per_pos: Vec<Vec<f64>> = (0..positions)
                .map(|s| {
                    let mut a = conv.forward(p, &Self::window(&padded, s, w));
                    a.iter_mut().for_each(|v| *v = v.tanh());
                    a
                })
                .collect();
            let mut best = vec![0usize; self.filters];
            for f in 0..self.filters {
                for s in 1..positions {
                    if per_pos[s][f] > per_pos[best[f]][f] {
                        best[f] = s;
                    }
                }
                pooled.push(per_pos[best[f]][f]);
            }
            acts.push(per_pos);
            argmax.push(best);
        }
        let out = self.proj.forward(p, &pooled);
        Ok((out, CnnCache { padded, original_len: xs.len(), acts, argmax, pooled }))
    }

    pub fn backward(&self, p: &ParameterSet, c: &CnnCache, dv: &[f64], g: &mut Gradients) -> Vec<Vec<f64>> {
        let d_pooled = self.proj.backward(p, &c.pooled, dv, g);
        let mut dpadded = vec![vec![0.0; self.input_dim]; c.padded.len()];
        for (k, (conv, &w)) in self.convs.iter().zip(&self.widths).enumerate() {
            // Group filters by their winning position so each window is
            // backpropagated once.
            let positions = c.acts[k].len();
            for s in 0..positions {
                let mut dpre = vec![0.0; self.filters];
                let mut any = false;
                for f in 0..self.filters {
                    if c.argmax[k][f] == s {
                        let a = c.acts[k][s][f];
                        dpre[f] = d_pooled[k * self.filters + f] * (1.0 - a * a);
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let window = Self::window(&c.padded, s, w);
                let dwin = conv.backward(p, &window, &dpre, g);
                for (j, chunk) in dwin.chunks_exact(self.input_dim).enumerate() {
                    add_assign(&mut dpadded[s + j], chunk);
                }
            }
        }
        dpadded.truncate(c.original_len);
        dpadded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Rnn,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(EncoderKind::Cnn),
            "rnn" | "gru" => Ok(EncoderKind::Rnn),
            other => Err(format!("unknown encoder `{other}` (expected cnn or rnn)")),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Rnn => "rnn",
        })
    }
}

/// Sentence encoder producing a vector of size `out_dim`.
#[derive(Debug, Clone)]
pub enum SentenceEncoder {
    /// Bidirectional GRU whose final states are projected to `out_dim`.
    Rnn { gru: BiGru, proj: Linear },
    Cnn(CnnEncoder),
}

#[derive(Debug, Clone)]
pub enum EncoderCache {
    Rnn { run: BiGruRun, concat: Vec<f64> },
    Cnn(CnnCache),
}

impl EncoderCache {
    pub fn branch(&self) -> Vec<usize> {
        match self {
            EncoderCache::Rnn { .. } => Vec::new(),
            EncoderCache::Cnn(c) => c.branch(),
        }
    }
}

impl SentenceEncoder {
    pub fn new<R: Rng>(
        p: &mut ParameterSet,
        name: &str,
        kind: EncoderKind,
        input_dim: usize,
        out_dim: usize,
        widths: &[usize],
        filters: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            EncoderKind::Rnn => {
                let gru = BiGru::new(p, &format!("{name}.gru"), input_dim, out_dim, rng);
                let proj = Linear::new(p, &format!("{name}.proj"), 2 * out_dim, out_dim, rng);
                SentenceEncoder::Rnn { gru, proj }
            }
            EncoderKind::Cnn => {
                SentenceEncoder::Cnn(CnnEncoder::new(p, &format!("{name}.cnn"), input_dim, widths, filters, out_dim, rng))
            }
        }
    }

    pub fn bind(
        p: &ParameterSet,
        name: &str,
        kind: EncoderKind,
        input_dim: usize,
        out_dim: usize,
        widths: &[usize],
        filters: usize,
    ) -> Self {
        match kind {
            EncoderKind::Rnn => SentenceEncoder::Rnn {
                gru: BiGru::bind(p, &format!("{name}.gru"), input_dim, out_dim),
                proj: Linear::bind(p, &format!("{name}.proj"), 2 * out_dim, out_dim),
            },
            EncoderKind::Cnn => {
                SentenceEncoder::Cnn(CnnEncoder::bind(p, &format!("{name}.cnn"), input_dim, widths, filters, out_dim))
            }
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            SentenceEncoder::Rnn { .. } => EncoderKind::Rnn,
            SentenceEncoder::Cnn(_) => EncoderKind::Cnn,
        }
    }

    pub fn encode(&self, p: &ParameterSet, xs: &[Vec<f64>]) -> Result<(Vec<f64>, EncoderCache), NnError> {
        match self {
            SentenceEncoder::Rnn { gru, proj } => {
                let run = gru.run(p, xs)?;
                let concat = run.final_state();
                let v = proj.forward(p, &concat);
                Ok((v, EncoderCache::Rnn { run, concat }))
            }
            SentenceEncoder::Cnn(cnn) => {
                let (v, c) = cnn.encode(p, xs)?;
                Ok((v, EncoderCache::Cnn(c)))
            }
        }
    }

    pub fn backward(&self, p: &ParameterSet, cache: &EncoderCache, dv: &[f64], g: &mut Gradients) -> Vec<Vec<f64>> {
        match (self, cache) {
            (SentenceEncoder::Rnn { gru, proj }, EncoderCache::Rnn { run, concat }) => {
                let dconcat = proj.backward(p, concat, dv, g);
                gru.backward(p, run, None, Some(&dconcat), g)
            }
            (SentenceEncoder::Cnn(cnn), EncoderCache::Cnn(c)) => cnn.backward(p, c, dv, g),
            _ => panic!("encoder cache does not match encoder kind"),
        }
    }
}

/// Additive attention: `score_j = vᵀ tanh(Ws s + Wh h_j + b)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_s: Linear,
    pub w_h: ParamId,
    pub v: ParamId,
    pub memory_dim: usize,
    pub attn_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    s: Vec<f64>,
    t: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Attention {
    pub fn new<R: Rng>(
        p: &mut ParameterSet,
        name: &str,
        state_dim: usize,
        memory_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w_s = Linear::new(p, &format!("{name}.w_s"), state_dim, attn_dim, rng);
        let w_h = p.add_uniform(&format!("{name}.w_h"), &[attn_dim, memory_dim], rng);
        let v = p.add_uniform(&format!("{name}.v"), &[attn_dim], rng);
        Attention { w_s, w_h, v, memory_dim, attn_dim }
    }

    pub fn bind(p: &ParameterSet, name: &str, state_dim: usize, memory_dim: usize, attn_dim: usize) -> Self {
        Attention {
            w_s: Linear::bind(p, &format!("{name}.w_s"), state_dim, attn_dim),
            w_h: p.id(&format!("{name}.w_h")).expect("bound parameter exists"),
            v: p.id(&format!("{name}.v")).expect("bound parameter exists"),
            memory_dim,
            attn_dim,
        }
    }

    /// Projects the memory once per sequence.
    pub fn keys(&self, p: &ParameterSet, memory: &[Vec<f64>]) -> Vec<Vec<f64>> {
        memory
            .iter()
            .map(|h| {
                let mut k = vec![0.0; self.attn_dim];
                matvec_add(p.get(self.w_h).data(), self.memory_dim, h, &mut k);
                k
            })
            .collect()
    }

    pub fn forward(
        &self,
        p: &ParameterSet,
        s: &[f64],
        memory: &[Vec<f64>],
        keys: &[Vec<f64>],
    ) -> (Vec<f64>, AttentionCache) {
        let q = self.w_s.forward(p, s);
        let v = p.get(self.v).data();
        let mut t = Vec::with_capacity(memory.len());
        let mut scores = Vec::with_capacity(memory.len());
        for k in keys {
            let tj: Vec<f64> = q.iter().zip(k).map(|(a, b)| (a + b).tanh()).collect();
            scores.push(dot(v, &tj));
            t.push(tj);
        }
        softmax_in_place(&mut scores);
        let mut context = vec![0.0; self.memory_dim];
        for (a, h) in scores.iter().zip(memory) {
            for (c, x) in context.iter_mut().zip(h) {
                *c += a * x;
            }
        }
        (context, AttentionCache { s: s.to_vec(), t, weights: scores })
    }

    /// Backpropagates a context gradient. Memory and key gradients are
    /// accumulated into the provided buffers; returns the state gradient.
    pub fn backward(
        &self,
        p: &ParameterSet,
        c: &AttentionCache,
        memory: &[Vec<f64>],
        dcontext: &[f64],
        g: &mut Gradients,
        dkeys: &mut [Vec<f64>],
        dmemory: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let da: Vec<f64> = memory.iter().map(|h| dot(dcontext, h)).collect();
        for (j, dm) in dmemory.iter_mut().enumerate() {
            for (d, x) in dm.iter_mut().zip(dcontext) {
                *d += c.weights[j] * x;
            }
        }
        let weighted: f64 = c.weights.iter().zip(&da).map(|(a, d)| a * d).sum();
        let v = p.get(self.v).data().to_vec();
        let mut dq = vec![0.0; self.attn_dim];
        let mut dv = vec![0.0; self.attn_dim];
        for (j, tj) in c.t.iter().enumerate() {
            let de = c.weights[j] * (da[j] - weighted);
            if de == 0.0 {
                continue;
            }
            for i in 0..self.attn_dim {
                dv[i] += de * tj[i];
                let dpre = de * v[i] * (1.0 - tj[i] * tj[i]);
                dq[i] += dpre;
                dkeys[j][i] += dpre;
            }
        }
        add_assign(g.get_mut(self.v).data_mut(), &dv);
        self.w_s.backward(p, &c.s, &dq, g)
    }

    pub fn keys_backward(&self, p: &ParameterSet, memory: &[Vec<f64>], dkeys: &[Vec<f64>], g: &mut Gradients, dmemory: &mut [Vec<f64>]) {
        for ((h, dk), dm) in memory.iter().zip(dkeys).zip(dmemory.iter_mut()) {
            outer_add(g.get_mut(self.w_h).data_mut(), self.memory_dim, dk, h);
            matvec_t_add(p.get(self.w_h).data(), self.memory_dim, dk, dm);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{finite_difference_check, Evaluation, Tensor};
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    /// Scales parameters away from the tiny init so gradients are not
    /// vanishingly small.
    fn scale_params(p: &mut ParameterSet, factor: f64) {
        let ids: Vec<_> = p.ids().collect();
        for id in ids {
            p.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Random fixed projection turning a vector into a scalar loss.
    fn probe(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_gradients_are_exact() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let lin = Linear::new(&mut p, "lin", 5, 3, &mut r);
        let x: Vec<f64> = probe(&mut r, 5);
        let c = probe(&mut r, 3);
        let mut g = p.zero_grads();
        lin.backward(&p, &x, &c, &mut g);
        let report = finite_difference_check(&mut p, &g, |p| Evaluation::smooth(dot(&lin.forward(p, &x), &c)));
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gru_cell_gradients() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let cell = GruCell::new(&mut p, "gru", 4, 5, &mut r);
        scale_params(&mut p, 5.0);
        let x = probe(&mut r, 4);
        let h = probe(&mut r, 5);
        let c = probe(&mut r, 5);
        let (_, cache) = cell.step(&p, &x, &h);
        let mut g = p.zero_grads();
        cell.backward(&p, &cache, &c, &mut g);
        let report = finite_difference_check(&mut p, &g, |p| Evaluation::smooth(dot(&cell.step(p, &x, &h).0, &c)));
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn gru_single_step_directions_agree() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let gru = BiGru::new(&mut p, "bi", 3, 4, &mut r);
        // Tie the backward weights to the forward ones.
        for (a, b) in [(gru.fwd.w_x, gru.bwd.w_x), (gru.fwd.w_h, gru.bwd.w_h), (gru.fwd.b, gru.bwd.b)] {
            let t = p.get(a).clone();
            *p.get_mut(b) = t;
        }
        let xs = random_seq(&mut r, 1, 3);
        let run = gru.run(&p, &xs).unwrap();
        assert_eq!(run.fwd_states[0], run.bwd_states[0]);
    }

    #[test]
    fn reversed_input_swaps_halves_with_tied_weights() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let gru = BiGru::new(&mut p, "bi", 3, 4, &mut r);
        for (a, b) in [(gru.fwd.w_x, gru.bwd.w_x), (gru.fwd.w_h, gru.bwd.w_h), (gru.fwd.b, gru.bwd.b)] {
            let t = p.get(a).clone();
            *p.get_mut(b) = t;
        }
        let xs = random_seq(&mut r, 5, 3);
        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let a = gru.run(&p, &xs).unwrap().final_state();
        let b = gru.run(&p, &rev).unwrap().final_state();
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);
    }

    #[test]
    fn empty_sequences_rejected() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let enc = SentenceEncoder::new(&mut p, "e", EncoderKind::Rnn, 3, 4, &[1, 2], 2, &mut r);
        assert!(matches!(enc.encode(&p, &[]), Err(NnError::EmptySequence)));
        let enc = SentenceEncoder::new(&mut p, "c", EncoderKind::Cnn, 3, 4, &[1, 2], 2, &mut r);
        assert!(matches!(enc.encode(&p, &[]), Err(NnError::EmptySequence)));
    }

    #[test]
    fn bigru_encoder_gradients() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let enc = SentenceEncoder::new(&mut p, "e", EncoderKind::Rnn, 3, 4, &[1], 1, &mut r);
        scale_params(&mut p, 4.0);
        let xs = random_seq(&mut r, 4, 3);
        let c = probe(&mut r, 4);
        let (_, cache) = enc.encode(&p, &xs).unwrap();
        let mut g = p.zero_grads();
        enc.backward(&p, &cache, &c, &mut g);
        let report = finite_difference_check(&mut p, &g, |p| {
            Evaluation::smooth(dot(&enc.encode(p, &xs).unwrap().0, &c))
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert_eq!(report.excluded, 0);
    }

    #[test]
    fn cnn_constant_input_single_filter() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let cnn = CnnEncoder::new(&mut p, "c", 3, &[2], 1, 1, &mut r);
        let x = vec![0.3, -0.2, 0.5];
        let xs = vec![x.clone(); 6];
        let (_, cache) = cnn.encode(&p, &xs).unwrap();
        let window: Vec<f64> = x.iter().chain(&x).copied().collect();
        let response = cnn.convs[0].forward(&p, &window)[0].tanh();
        assert_eq!(cache.pooled()[0], response);
    }

    #[test]
    fn cnn_ngram_sensitivity() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let cnn = CnnEncoder::new(&mut p, "c", 2, &[2], 3, 3, &mut r);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let pad = vec![0.5, 0.5];
        // The bigram (a, b) appears in both; surrounding tokens differ but
        // contain no other window that could win.
        let s1 = vec![a.clone(), b.clone()];
        let s2 = vec![b.clone(), a.clone()];
        let (v1, _) = cnn.encode(&p, &s1).unwrap();
        let (v2, _) = cnn.encode(&p, &s2).unwrap();
        assert_ne!(v1, v2, "order of a width-2 window matters");
        let s3 = vec![a.clone(), b.clone(), a.clone(), b.clone()];
        let (_, c1) = cnn.encode(&p, &s1).unwrap();
        let (_, c3) = cnn.encode(&p, &s3).unwrap();
        // (b, a) may beat (a, b) for some filters, but every pooled value of
        // s3 is at least the (a, b) response.
        for (x, y) in c3.pooled().iter().zip(c1.pooled()) {
            assert!(x >= y);
        }
        let s4 = vec![a.clone(), b.clone(), a.clone(), b.clone(), pad];
        let (_, c4) = cnn.encode(&p, &s4).unwrap();
        let _ = c4;
    }

    #[test]
    fn cnn_encoder_gradients_away_from_ties() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let enc = SentenceEncoder::new(&mut p, "e", EncoderKind::Cnn, 3, 4, &[1, 2, 3], 3, &mut r);
        scale_params(&mut p, 5.0);
        let xs = random_seq(&mut r, 5, 3);
        let c = probe(&mut r, 4);
        let (_, cache) = enc.encode(&p, &xs).unwrap();
        let mut g = p.zero_grads();
        enc.backward(&p, &cache, &c, &mut g);
        let report = finite_difference_check(&mut p, &g, |p| {
            let (v, cache) = enc.encode(p, &xs).unwrap();
            Evaluation { loss: dot(&v, &c), branch: cache.branch() }
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn cnn_identical_windows_tie_consistently() {
        let mut p = ParameterSet::new();
        let mut r = rng();
        let enc = CnnEncoder::new(&mut p, "c", 1, &[1], 1, 1, &mut r);
        // Identical windows stay tied under any weight perturbation, so the
        // winner is stable and the routed gradient is exact.
        let xs = vec![vec![0.7], vec![0.7]];
        let (_, cache) = enc.encode(&p, &xs).unwrap();
        let mut g = p.zero_grads();
        enc.backward(&p, &cache, &[1.0], &mut g);
        let report = finite_difference_check(&mut p, &g, |p| {
            let (v, cache) = enc.encode(p, &xs).unwrap();
            Evaluation { loss: v[0], branch: cache.branch() }
        });
        assert_eq!(report.excluded, 0);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_weights_and_gradients() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let att = Attention::new(&mut p, "att", 4, 3, 5, &mut r);
        scale_params(&mut p, 5.0);
        let s = probe(&mut r, 4);

        let single = random_seq(&mut r, 1, 3);
        let (_, c) = att.forward(&p, &s, &single, &att.keys(&p, &single));
        assert_eq!(c.weights, vec![1.0]);

        let same = vec![single[0].clone(); 4];
        let (ctx, c) = att.forward(&p, &s, &same, &att.keys(&p, &same));
        for w in &c.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        assert!((ctx[0] - single[0][0]).abs() < 1e-12);

        let memory = random_seq(&mut r, 4, 3);
        let probe_vec = probe(&mut r, 3);
        let keys = att.keys(&p, &memory);
        let (_, cache) = att.forward(&p, &s, &memory, &keys);
        assert!((cache.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut g = p.zero_grads();
        let mut dkeys = vec![vec![0.0; 5]; 4];
        let mut dmem = vec![vec![0.0; 3]; 4];
        att.backward(&p, &cache, &memory, &probe_vec, &mut g, &mut dkeys, &mut dmem);
        att.keys_backward(&p, &memory, &dkeys, &mut g, &mut dmem);
        let report = finite_difference_check(&mut p, &g, |p| {
            let keys = att.keys(p, &memory);
            Evaluation::smooth(dot(&att.forward(p, &s, &memory, &keys).0, &probe_vec))
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn embedding_gradients() {
        let mut r = rng();
        let mut p = ParameterSet::new();
        let emb = Embedding::new(&mut p, "emb", 6, 3, &mut r);
        let ids = [1usize, 4, 1];
        let c: Vec<Vec<f64>> = (0..3).map(|_| probe(&mut r, 3)).collect();
        let mut g = p.zero_grads();
        emb.backward(&ids, &c, &mut g);
        let report = finite_difference_check(&mut p, &g, |p| {
            Evaluation::smooth(emb.lookup(p, &ids).iter().zip(&c).map(|(a, b)| dot(a, b)).sum())
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(g.get(emb.table).row(0), &[0.0; 3]);
        let _ = Tensor::zeros(&[1]);
    }
}
