//! Array-path inference: step-synchronized dual-stream decoding with an
//! incremental per-layer column cache, pre-determined-stream precompute, and
//! task-routed generation.
//!
//! The numeric inner loops reuse the same kernels and reduction orders as the
//! graph path, so cached columns match a full re-forward bitwise; the
//! incremental-consistency check asserts that equivalence.

use rand::Rng;

use super::forward::{forward_spec, ForwardSpec, ParamLeaves, StreamInputs};
use super::Dslm;
use crate::config::SamplerConfig;
use crate::corpus::Clip;
use crate::error::{CoreError, CoreResult};
use crate::graph::Graph;
use crate::kernels;
use crate::mask::{route_task, BcaMaskKind, MaskConfig, SaMaskKind};
use crate::params::{AttnIds, DecoderIds, EncBlockIds, FfnIds, GroupId, ParamStore};
use crate::sampler::top_k_sample;
use crate::scalar::Scalar;
use crate::task::TaskId;
use crate::vocab::{self, BOS, EDIT, EOS, SEP};

const LN_EPS: f64 = 1e-5;

fn rows_linear<S: Scalar>(x: &[S], rows: usize, w: &[S], d_in: usize, d_out: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * d_out];
    kernels::matmul_nn(x, w, &mut out, rows, d_in, d_out);
    out
}

fn ln_rows<S: Scalar>(x: &[S], rows: usize, gain: &[S], bias: &[S]) -> Vec<S> {
    let d = gain.len();
    let mut out = vec![S::zero(); rows * d];
    for r in 0..rows {
        kernels::layer_norm_row(
            &x[r * d..(r + 1) * d],
            gain,
            bias,
            &mut out[r * d..(r + 1) * d],
            S::from_f64(LN_EPS),
        );
    }
    out
}

/// Attention for a single pre-normalized query row over pre-normalized
/// key/value source rows. Mirrors the graph path op-for-op.
#[allow(clippy::too_many_arguments)]
fn attn_one_query<S: Scalar>(
    xq: &[S],
    kv_rows: &[S],
    n_keys: usize,
    wq: &[S],
    wk: &[S],
    wv: &[S],
    wo: &[S],
    d: usize,
    heads: usize,
) -> Vec<S> {
    debug_assert!(n_keys >= 1);
    let dk = d / heads;
    let q = rows_linear(xq, 1, wq, d, d);
    let k = rows_linear(kv_rows, n_keys, wk, d, d);
    let v = rows_linear(kv_rows, n_keys, wv, d, d);
    let scale = S::from_f64(1.0 / (dk as f64).sqrt());
    let mut merged = vec![S::zero(); d];
    let zero_mask = vec![S::zero(); n_keys];
    for h in 0..heads {
        let mut scores = vec![S::zero(); n_keys];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = S::zero();
            let qo = h * dk;
            let ko = j * d + h * dk;
            for p in 0..dk {
                acc += q[qo + p] * k[ko + p];
            }
            *s = acc * scale;
        }
        kernels::softmax_masked_row(&mut scores, &zero_mask, 0)
            .expect("non-empty key set");
        let out = &mut merged[h * dk..(h + 1) * dk];
        for (j, &p) in scores.iter().enumerate() {
            let vo = j * d + h * dk;
            for (o, &vv) in out.iter_mut().zip(&v[vo..vo + dk]) {
                *o += p * vv;
            }
        }
    }
    rows_linear(&merged, 1, wo, d, d)
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-layer hidden-column cache of one decoder stream. `layers[l]` holds the
/// block inputs at layer l (layer 0 is the embedding output); cached columns
/// are identical to a full re-forward.
#[derive(Debug, Clone)]
pub struct StreamState<S: Scalar> {
    layers: Vec<Vec<S>>,
    e_final: Vec<S>,
    len: usize,
}

impl<S: Scalar> StreamState<S> {
    fn new(dec_layers: usize) -> Self {
        StreamState {
            layers: vec![Vec::new(); dec_layers + 1],
            e_final: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final-layer post-norm state of one column.
    pub fn e_row(&self, col: usize, d: usize) -> &[S] {
        &self.e_final[col * d..(col + 1) * d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Vocal,
    Accomp,
}

struct Half<S: Scalar> {
    enabled: bool,
    /// Pre-determined streams are precomputed in full and never stepped.
    fixed: bool,
    state: StreamState<S>,
}

/// Step-synchronized incremental decoder over both streams.
pub struct DualDecoder<'a, S: Scalar> {
    model: &'a Dslm,
    store: &'a ParamStore<S>,
    pub mask_config: MaskConfig,
    h_lyr: Vec<S>,
    t_l: usize,
    vocal: Half<S>,
    accomp: Half<S>,
}

impl<'a, S: Scalar> DualDecoder<'a, S> {
    pub fn new(
        model: &'a Dslm,
        store: &'a ParamStore<S>,
        mask_config: MaskConfig,
        lyric_ids: &[u32],
    ) -> CoreResult<Self> {
        let h_lyr = encode_lyrics_infer(model, store, lyric_ids)?;
        let mk = |enabled: bool| Half {
            enabled,
            fixed: false,
            state: StreamState::new(model.cfg.dec_layers),
        };
        Ok(DualDecoder {
            model,
            store,
            mask_config,
            h_lyr,
            t_l: lyric_ids.len(),
            vocal: mk(mask_config.vocal_enabled),
            accomp: mk(mask_config.accomp_enabled),
        })
    }

    pub fn state(&self, side_vocal: bool) -> &StreamState<S> {
        if side_vocal {
            &self.vocal.state
        } else {
            &self.accomp.state
        }
    }

    fn g(&self, id: GroupId) -> &[S] {
        self.store.slice(id)
    }

    fn decoder_ids(&self, side: Side) -> &DecoderIds {
        match side {
            Side::Vocal => &self.model.ids.vocal,
            Side::Accomp => &self.model.ids.accomp,
        }
    }

    /// Fully precompute a pre-determined stream with non-causal SA (its BCA
    /// direction is cut off under A2V/V2A, so it never reads the other
    /// stream).
    pub fn precompute_fixed(&mut self, vocal_side: bool, input: &[u32]) -> CoreResult<()> {
        let side = if vocal_side { Side::Vocal } else { Side::Accomp };
        let (sa_kind, bypass) = match side {
            Side::Vocal => (
                self.mask_config.vocal_sa,
                crate::mask::build_bca_masks(self.mask_config.bca, 1).vocal_bypass,
            ),
            Side::Accomp => (
                self.mask_config.accomp_sa,
                crate::mask::build_bca_masks(self.mask_config.bca, 1).accomp_bypass,
            ),
        };
        if sa_kind != SaMaskKind::NonCausal || !bypass {
            return Err(CoreError::BadCondition {
                task: "precompute_fixed",
                detail: "pre-determined stream needs non-causal SA and a cut-off BCA".into(),
            });
        }
        let n = input.len();
        if n > self.model.cfg.ctx_dec {
            return Err(CoreError::Overlength {
                len: n,
                max: self.model.cfg.ctx_dec,
            });
        }
        let d = self.model.cfg.d_h;
        let heads = self.model.cfg.heads;
        let ids = self.decoder_ids(side).clone();
        let tower = &ids.tower;
        // embeddings
        let tok_table = self.g(tower.tok_emb.unwrap());
        let pos_table = self.g(tower.pos_emb.unwrap());
        let mut h = vec![S::zero(); n * d];
        for (i, &tok) in input.iter().enumerate() {
            let row = &mut h[i * d..(i + 1) * d];
            row.copy_from_slice(&tok_table[tok as usize * d..(tok as usize + 1) * d]);
            add_assign(row, &pos_table[i * d..(i + 1) * d]);
        }
        let mut layers = Vec::with_capacity(self.model.cfg.dec_layers + 1);
        layers.push(h.clone());
        for blk in &ids.blocks {
            // SA, full attention
            let xn = ln_rows(&h, n, self.g(blk.sa.norm_gain), self.g(blk.sa.norm_bias));
            for i in 0..n {
                let out = attn_one_query(
                    &xn[i * d..(i + 1) * d],
                    &xn,
                    n,
                    self.g(blk.sa.wq),
                    self.g(blk.sa.wk),
                    self.g(blk.sa.wv),
                    self.g(blk.sa.wo),
                    d,
                    heads,
                );
                add_assign(&mut h[i * d..(i + 1) * d], &out);
            }
            // CA over lyrics
            let xn = ln_rows(&h, n, self.g(blk.ca.norm_gain), self.g(blk.ca.norm_bias));
            for i in 0..n {
                let out = attn_one_query(
                    &xn[i * d..(i + 1) * d],
                    &self.h_lyr,
                    self.t_l,
                    self.g(blk.ca.wq),
                    self.g(blk.ca.wk),
                    self.g(blk.ca.wv),
                    self.g(blk.ca.wo),
                    d,
                    heads,
                );
                add_assign(&mut h[i * d..(i + 1) * d], &out);
            }
            // BCA bypassed; FFN
            ffn_rows(&mut h, n, d, blk_ffn(self.store, &blk.ffn));
            layers.push(h.clone());
        }
        let e = ln_rows(&h, n, self.g(tower.final_gain), self.g(tower.final_bias));
        let half = match side {
            Side::Vocal => &mut self.vocal,
            Side::Accomp => &mut self.accomp,
        };
        half.fixed = true;
        half.state.layers = layers;
        half.state.e_final = e;
        half.state.len = n;
        Ok(())
    }

    fn bca_bound(&self, side: Side, own_col: usize) -> Option<usize> {
        let masks = crate::mask::build_bca_masks(self.mask_config.bca, 1);
        let (bypass, other) = match side {
            Side::Vocal => (masks.vocal_bypass, &self.accomp),
            Side::Accomp => (masks.accomp_bypass, &self.vocal),
        };
        if bypass || !other.enabled || other.state.len == 0 {
            return None;
        }
        let bound = match self.mask_config.bca {
            BcaMaskKind::Br => (own_col + 1).min(other.state.len),
            BcaMaskKind::A2v | BcaMaskKind::V2a => other.state.len,
            BcaMaskKind::None => return None,
        };
        Some(bound)
    }

    /// Compute one new column for a stepping (causal) stream; `layer_inputs`
    /// of the other stream must already hold all columns this one may read.
    fn step_side(&mut self, side: Side, token: u32) -> CoreResult<()> {
        let d = self.model.cfg.d_h;
        let sa_kind = match side {
            Side::Vocal => self.mask_config.vocal_sa,
            Side::Accomp => self.mask_config.accomp_sa,
        };
        if sa_kind != SaMaskKind::Causal {
            return Err(CoreError::BadCondition {
                task: "step",
                detail: "only causal streams can be stepped incrementally".into(),
            });
        }
        let ids = self.decoder_ids(side).clone();
        let i = match side {
            Side::Vocal => self.vocal.state.len,
            Side::Accomp => self.accomp.state.len,
        };
        if i + 1 > self.model.cfg.ctx_dec {
            return Err(CoreError::Overlength {
                len: i + 1,
                max: self.model.cfg.ctx_dec,
            });
        }
        let tower = &ids.tower;
        let tok_table = self.g(tower.tok_emb.unwrap());
        let pos_table = self.g(tower.pos_emb.unwrap());
        let mut col = tok_table[token as usize * d..(token as usize + 1) * d].to_vec();
        add_assign(&mut col, &pos_table[i * d..(i + 1) * d]);
        {
            let half = match side {
                Side::Vocal => &mut self.vocal,
                Side::Accomp => &mut self.accomp,
            };
            half.state.layers[0].extend_from_slice(&col);
        }
        Ok(())
    }

    fn advance_layer(&mut self, side: Side, layer: usize) -> CoreResult<()> {
        let d = self.model.cfg.d_h;
        let heads = self.model.cfg.heads;
        let ids = self.decoder_ids(side).clone();
        let blk = &ids.blocks[layer];
        let (own_len, i) = {
            let half = match side {
                Side::Vocal => &self.vocal,
                Side::Accomp => &self.accomp,
            };
            (half.state.layers[layer].len() / d, half.state.len)
        };
        debug_assert_eq!(own_len, i + 1);
        let own_rows = {
            let half = match side {
                Side::Vocal => &self.vocal,
                Side::Accomp => &self.accomp,
            };
            half.state.layers[layer].clone()
        };
        let mut h = own_rows[i * d..(i + 1) * d].to_vec();

        // SA over own cached columns 0..=i
        let xn_all = ln_rows(&own_rows, i + 1, self.g(blk.sa.norm_gain), self.g(blk.sa.norm_bias));
        let out = attn_one_query(
            &xn_all[i * d..(i + 1) * d],
            &xn_all,
            i + 1,
            self.g(blk.sa.wq),
            self.g(blk.sa.wk),
            self.g(blk.sa.wv),
            self.g(blk.sa.wo),
            d,
            heads,
        );
        add_assign(&mut h, &out);

        // CA over the encoded lyrics
        let xq = ln_rows(&h, 1, self.g(blk.ca.norm_gain), self.g(blk.ca.norm_bias));
        let out = attn_one_query(
            &xq,
            &self.h_lyr,
            self.t_l,
            self.g(blk.ca.wq),
            self.g(blk.ca.wk),
            self.g(blk.ca.wv),
            self.g(blk.ca.wo),
            d,
            heads,
        );
        add_assign(&mut h, &out);

        // BCA over the other stream's previous-layer columns
        if let Some(bound) = self.bca_bound(side, i) {
            let other_rows = {
                let other = match side {
                    Side::Vocal => &self.accomp,
                    Side::Accomp => &self.vocal,
                };
                other.state.layers[layer][..bound * d].to_vec()
            };
            let (kg, kb) = blk.bca.kv_norm.unwrap();
            let kv = ln_rows(&other_rows, bound, self.g(kg), self.g(kb));
            let xq = ln_rows(&h, 1, self.g(blk.bca.norm_gain), self.g(blk.bca.norm_bias));
            let out = attn_one_query(
                &xq,
                &kv,
                bound,
                self.g(blk.bca.wq),
                self.g(blk.bca.wk),
                self.g(blk.bca.wv),
                self.g(blk.bca.wo),
                d,
                heads,
            );
            add_assign(&mut h, &out);
        }

        // FFN
        ffn_rows(&mut h, 1, d, blk_ffn(self.store, &blk.ffn));

        let half = match side {
            Side::Vocal => &mut self.vocal,
            Side::Accomp => &mut self.accomp,
        };
        half.state.layers[layer + 1].extend_from_slice(&h);
        Ok(())
    }

    fn finalize_column(&mut self, side: Side) -> Vec<S> {
        let d = self.model.cfg.d_h;
        let ids = self.decoder_ids(side).clone();
        let tower = &ids.tower;
        let (gain, bias, head) = (
            self.g(tower.final_gain).to_vec(),
            self.g(tower.final_bias).to_vec(),
            tower.head.unwrap(),
        );
        let l = self.model.cfg.dec_layers;
        let half = match side {
            Side::Vocal => &mut self.vocal,
            Side::Accomp => &mut self.accomp,
        };
        let i = half.state.len;
        let row = half.state.layers[l][i * d..(i + 1) * d].to_vec();
        let e = ln_rows(&row, 1, &gain, &bias);
        half.state.e_final.extend_from_slice(&e);
        half.state.len += 1;
        let head_w = self.g(head);
        let vsize = self.store.layout.group(head).shape[1];
        rows_linear(&e, 1, head_w, d, vsize)
    }

    /// Feed one token per stepping stream; both streams advance through the
    /// layers in lockstep so BCA always reads the previous layer's columns at
    /// positions <= t of both streams. Returns next-token logits per stream.
    pub fn step(
        &mut self,
        v_tok: Option<u32>,
        a_tok: Option<u32>,
    ) -> CoreResult<(Option<Vec<S>>, Option<Vec<S>>)> {
        if let Some(t) = v_tok {
            if !self.vocal.enabled || self.vocal.fixed {
                return Err(CoreError::BadCondition {
                    task: "step",
                    detail: "vocal stream is not steppable for this task".into(),
                });
            }
            self.step_side(Side::Vocal, t)?;
        }
        if let Some(t) = a_tok {
            if !self.accomp.enabled || self.accomp.fixed {
                return Err(CoreError::BadCondition {
                    task: "step",
                    detail: "accomp stream is not steppable for this task".into(),
                });
            }
            self.step_side(Side::Accomp, t)?;
        }
        for l in 0..self.model.cfg.dec_layers {
            if v_tok.is_some() {
                self.advance_layer(Side::Vocal, l)?;
            }
            if a_tok.is_some() {
                self.advance_layer(Side::Accomp, l)?;
            }
        }
        let lv = v_tok.map(|_| self.finalize_column(Side::Vocal));
        let la = a_tok.map(|_| self.finalize_column(Side::Accomp));
        Ok((lv, la))
    }
}

struct FfnWeights<'a, S: Scalar> {
    norm_gain: &'a [S],
    norm_bias: &'a [S],
    w1: &'a [S],
    w2: &'a [S],
    d_ff: usize,
}

fn blk_ffn<'a, S: Scalar>(store: &'a ParamStore<S>, ids: &FfnIds) -> FfnWeights<'a, S> {
    FfnWeights {
        norm_gain: store.slice(ids.norm_gain),
        norm_bias: store.slice(ids.norm_bias),
        w1: store.slice(ids.w1),
        w2: store.slice(ids.w2),
        d_ff: store.layout.group(ids.w1).shape[1],
    }
}

fn ffn_rows<S: Scalar>(h: &mut [S], rows: usize, d: usize, w: FfnWeights<'_, S>) {
    let xn = ln_rows(h, rows, w.norm_gain, w.norm_bias);
    let mut mid = rows_linear(&xn, rows, w.w1, d, w.d_ff);
    for v in mid.iter_mut() {
        *v = kernels::gelu(*v);
    }
    let out = rows_linear(&mid, rows, w.w2, w.d_ff, d);
    add_assign(h, &out);
}

/// Full-attention lyric encoder on the array path.
pub fn encode_lyrics_infer<S: Scalar>(
    model: &Dslm,
    store: &ParamStore<S>,
    lyric_ids: &[u32],
) -> CoreResult<Vec<S>> {
    if lyric_ids.is_empty() {
        return Err(CoreError::BadCondition {
            task: "encode_lyrics",
            detail: "empty lyric ids; use the null-lyric token".into(),
        });
    }
    if lyric_ids.len() > model.cfg.ctx_lyrics {
        return Err(CoreError::Overlength {
            len: lyric_ids.len(),
            max: model.cfg.ctx_lyrics,
        });
    }
    let d = model.cfg.d_h;
    let heads = model.cfg.heads;
    let n = lyric_ids.len();
    let enc = &model.ids.encoder;
    let tok_table = store.slice(enc.tower.tok_emb.unwrap());
    let pos_table = store.slice(enc.tower.pos_emb.unwrap());
    let mut h = vec![S::zero(); n * d];
    for (i, &tok) in lyric_ids.iter().enumerate() {
        if tok as usize >= model.cfg.vocab_lyrics {
            return Err(CoreError::TokenOutOfRange {
                id: tok,
                vocab: model.cfg.vocab_lyrics,
            });
        }
        let row = &mut h[i * d..(i + 1) * d];
        row.copy_from_slice(&tok_table[tok as usize * d..(tok as usize + 1) * d]);
        add_assign(row, &pos_table[i * d..(i + 1) * d]);
    }
    for EncBlockIds { sa, ffn } in &enc.blocks {
        let xn = ln_rows(&h, n, store.slice(sa.norm_gain), store.slice(sa.norm_bias));
        for i in 0..n {
            let out = attn_one_query(
                &xn[i * d..(i + 1) * d],
                &xn,
                n,
                store.slice(sa.wq),
                store.slice(sa.wk),
                store.slice(sa.wv),
                store.slice(sa.wo),
                d,
                heads,
            );
            add_assign(&mut h[i * d..(i + 1) * d], &out);
        }
        ffn_rows(&mut h, n, d, blk_ffn(store, ffn));
    }
    Ok(ln_rows(
        &h,
        n,
        store.slice(enc.tower.final_gain),
        store.slice(enc.tower.final_bias),
    ))
}

/// Song decoder over gathered, clip-position-aligned state rows; returns
/// positionwise argmax tokens.
pub fn song_decode_rows<S: Scalar>(
    model: &Dslm,
    store: &ParamStore<S>,
    e_v_rows: &[S],
    e_a_rows: &[S],
    n: usize,
) -> CoreResult<Vec<u32>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = model.cfg.d_h;
    let heads = model.cfg.heads;
    debug_assert_eq!(e_v_rows.len(), n * d);
    debug_assert_eq!(e_a_rows.len(), n * d);
    let mut cat = Vec::with_capacity(n * 2 * d);
    for i in 0..n {
        cat.extend_from_slice(&e_v_rows[i * d..(i + 1) * d]);
        cat.extend_from_slice(&e_a_rows[i * d..(i + 1) * d]);
    }
    let mut h = rows_linear(&cat, n, store.slice(model.ids.song.in_proj), 2 * d, d);
    for EncBlockIds { sa, ffn } in &model.ids.song.blocks {
        let xn = ln_rows(&h, n, store.slice(sa.norm_gain), store.slice(sa.norm_bias));
        for i in 0..n {
            let out = attn_one_query(
                &xn[i * d..(i + 1) * d],
                &xn,
                n,
                store.slice(sa.wq),
                store.slice(sa.wk),
                store.slice(sa.wv),
                store.slice(sa.wo),
                d,
                heads,
            );
            add_assign(&mut h[i * d..(i + 1) * d], &out);
        }
        ffn_rows(&mut h, n, d, blk_ffn(store, ffn));
    }
    let tower = &model.ids.song.tower;
    let e = ln_rows(&h, n, store.slice(tower.final_gain), store.slice(tower.final_bias));
    let head = store.slice(tower.head.unwrap());
    let vs = model.cfg.vocab_song;
    let logits = rows_linear(&e, n, head, d, vs);
    Ok((0..n)
        .map(|i| crate::sampler::argmax(&logits[i * vs..(i + 1) * vs]))
        .collect())
}

// ---- task-routed generation -------------------------------------------------

/// Conditions for [`generate`]; which fields are mandatory, optional or
/// forbidden depends on the task row.
#[derive(Debug, Clone, Default)]
pub struct Conditions {
    /// Lyric word symbols in [0, 16).
    pub lyrics: Option<Vec<u32>>,
    pub vocal_prompt: Option<Vec<u32>>,
    pub accomp_prompt: Option<Vec<u32>>,
    pub predetermined_vocal: Option<Vec<u32>>,
    pub predetermined_accomp: Option<Vec<u32>>,
    /// Editing tasks: suffix span of the original track, laid out before the
    /// EDIT token.
    pub edit_suffix_vocal: Option<Vec<u32>>,
    pub edit_suffix_accomp: Option<Vec<u32>>,
}

/// Output token streams of one generation call; `None` for streams the task
/// does not produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub vocal: Option<Vec<u32>>,
    pub accomp: Option<Vec<u32>>,
    pub song: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
enum Plan {
    /// prefix tokens to feed, clip position of the first generated token,
    /// tokens echoed verbatim before the continuation (prompt contents)
    Step {
        prefix: Vec<u32>,
        start_pos: usize,
        echo: Vec<u32>,
    },
    Fixed(Vec<u32>),
    Off,
}

fn check_track_tokens(name: &str, tokens: &[u32], vocab: usize) -> CoreResult<()> {
    for &t in tokens {
        if t as usize >= vocab {
            return Err(CoreError::TokenOutOfRange { id: t, vocab });
        }
        if vocab::is_special(t) {
            return Err(CoreError::BadCondition {
                task: "generate",
                detail: format!("{name} contains special token {t}"),
            });
        }
    }
    Ok(())
}

struct TaskRow {
    name: &'static str,
    conditions: &'static str,
}

fn table_row(task: TaskId) -> TaskRow {
    let (name, conditions) = match task {
        TaskId::LyricsToSong => (
            "lyrics-to-song",
            "Lyrics, [Vocal prompt], [Accompaniment prompt]",
        ),
        TaskId::LyricsToVocals => ("lyrics-to-vocals", "Lyrics, [Vocal prompt]"),
        TaskId::AccompanimentToSong => (
            "accompaniment-to-song",
            "Lyrics, Accompaniment, [Vocal prompt]",
        ),
        TaskId::VocalsToSong => ("vocals-to-song", "Vocals, [Lyrics], [Accompaniment prompt]"),
        TaskId::MusicContinuation => ("music-continuation", "Accompaniment prompt"),
        TaskId::SongEditing => ("song-editing", "Lyrics, Vocals, Accompaniment"),
        TaskId::VocalsEditing => ("vocals-editing", "Lyrics, Vocals"),
        TaskId::VocalsEditingInSong => (
            "vocals-editing-in-song",
            "Lyrics, Vocals, Accompaniment",
        ),
    };
    TaskRow { name, conditions }
}

fn require<T>(
    task: TaskId,
    field: Option<T>,
    what: &str,
) -> CoreResult<T> {
    let row = table_row(task);
    field.ok_or_else(|| CoreError::BadCondition {
        task: row.name,
        detail: format!("missing {what}; the task's conditions are: {}", row.conditions),
    })
}

fn forbid<T>(task: TaskId, field: &Option<T>, what: &str) -> CoreResult<()> {
    if field.is_some() {
        let row = table_row(task);
        return Err(CoreError::BadCondition {
            task: row.name,
            detail: format!("{what} is not a condition of this task ({})", row.conditions),
        });
    }
    Ok(())
}

fn lyric_ids_from_words(model: &Dslm, words: Option<&[u32]>) -> CoreResult<Vec<u32>> {
    match words {
        None => Ok(vec![vocab::NULL_LYRIC]),
        Some(ws) => {
            if ws.is_empty() {
                return Ok(vec![vocab::NULL_LYRIC]);
            }
            for &w in ws {
                if w as usize >= vocab::WORD_SYMBOLS {
                    return Err(CoreError::TokenOutOfRange {
                        id: w,
                        vocab: vocab::WORD_SYMBOLS,
                    });
                }
            }
            let ids: Vec<u32> = ws.iter().map(|&w| vocab::word_to_lyric_token(w)).collect();
            if ids.len() > model.cfg.ctx_lyrics {
                return Err(CoreError::Overlength {
                    len: ids.len(),
                    max: model.cfg.ctx_lyrics,
                });
            }
            Ok(ids)
        }
    }
}

fn prompt_plan(model: &Dslm, prompt: Option<&[u32]>, vocab_size: usize) -> CoreResult<Plan> {
    match prompt {
        None => Ok(Plan::Step {
            prefix: vec![BOS],
            start_pos: 0,
            echo: Vec::new(),
        }),
        Some(p) => {
            check_track_tokens("prompt", p, vocab_size)?;
            if p.len() + 2 >= model.cfg.ctx_dec {
                return Err(CoreError::Overlength {
                    len: p.len() + 2,
                    max: model.cfg.ctx_dec,
                });
            }
            let mut prefix = p.to_vec();
            prefix.push(SEP);
            prefix.push(BOS);
            Ok(Plan::Step {
                prefix,
                start_pos: p.len(),
                echo: p.to_vec(),
            })
        }
    }
}

fn edit_plan(model: &Dslm, suffix: &[u32], vocab_size: usize) -> CoreResult<Plan> {
    check_track_tokens("edit suffix span", suffix, vocab_size)?;
    if suffix.is_empty() {
        return Err(CoreError::BadEditSpan {
            detail: "empty suffix span".into(),
        });
    }
    if suffix.len() + 2 >= model.cfg.ctx_dec {
        return Err(CoreError::Overlength {
            len: suffix.len() + 2,
            max: model.cfg.ctx_dec,
        });
    }
    let mut prefix = suffix.to_vec();
    prefix.push(EDIT);
    prefix.push(BOS);
    Ok(Plan::Step {
        prefix,
        start_pos: 0,
        echo: Vec::new(),
    })
}

/// Step-synchronized dual-stream generation for one task. Pre-determined
/// streams are precomputed in full before the generated streams start;
/// generation stops at EOS or the max context; the song decoder then runs
/// non-autoregressively over clip-position-aligned state pairs, emitting by
/// positionwise argmax.
pub fn generate<S: Scalar, R: Rng>(
    model: &Dslm,
    store: &ParamStore<S>,
    task: TaskId,
    cond: &Conditions,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> CoreResult<Generated> {
    let mc = route_task(task);
    let (v_plan, a_plan) = plan_streams(model, task, cond)?;
    let lyric_words = cond.lyrics.as_deref();
    let lyric_ids = lyric_ids_from_words(model, lyric_words)?;
    let mut dec = DualDecoder::new(model, store, mc, &lyric_ids)?;

    // pre-determined streams first
    if let Plan::Fixed(toks) = &v_plan {
        let mut input = vec![BOS];
        input.extend_from_slice(toks);
        dec.precompute_fixed(true, &input)?;
    }
    if let Plan::Fixed(toks) = &a_plan {
        let mut input = vec![BOS];
        input.extend_from_slice(toks);
        dec.precompute_fixed(false, &input)?;
    }

    struct Stepper {
        tokens: Vec<u32>,
        prefix_len: usize,
        done: bool,
    }
    let mk_stepper = |plan: &Plan| -> Option<Stepper> {
        match plan {
            Plan::Step { prefix, .. } => Some(Stepper {
                tokens: prefix.clone(),
                prefix_len: prefix.len(),
                done: false,
            }),
            _ => None,
        }
    };
    let mut v_step = mk_stepper(&v_plan);
    let mut a_step = mk_stepper(&a_plan);

    let max_cols = model.cfg.ctx_dec;
    let mut s = 0usize;
    loop {
        let feed = |st: &Option<Stepper>| -> Option<u32> {
            st.as_ref().and_then(|x| {
                if x.done || s >= x.tokens.len() {
                    None
                } else {
                    Some(x.tokens[s])
                }
            })
        };
        let (fv, fa) = (feed(&v_step), feed(&a_step));
        if fv.is_none() && fa.is_none() {
            break;
        }
        let (lv, la) = dec.step(fv, fa)?;
        s += 1;
        let mut extend = |st: &mut Option<Stepper>, logits: Option<Vec<S>>| -> CoreResult<()> {
            if let (Some(x), Some(lg)) = (st.as_mut(), logits) {
                if !x.done && s >= x.tokens.len() {
                    if s >= max_cols {
                        x.done = true;
                        return Ok(());
                    }
                    let tok = top_k_sample(&lg, sampler, rng)?;
                    if tok == EOS || vocab::is_special(tok) {
                        // any structural token ends the stream
                        x.done = true;
                    } else {
                        x.tokens.push(tok);
                    }
                }
            }
            Ok(())
        };
        // fixed sampling order: vocal first, then accomp
        extend(&mut v_step, lv)?;
        extend(&mut a_step, la)?;
        let all_done = v_step.as_ref().map_or(true, |x| x.done || s >= max_cols)
            && a_step.as_ref().map_or(true, |x| x.done || s >= max_cols);
        if all_done && s >= v_step.as_ref().map_or(0, |x| x.tokens.len())
            && s >= a_step.as_ref().map_or(0, |x| x.tokens.len())
        {
            break;
        }
    }

    // assemble per-stream outputs
    let track_out = |plan: &Plan, st: &Option<Stepper>| -> Option<Vec<u32>> {
        match plan {
            Plan::Off => None,
            Plan::Fixed(toks) => Some(toks.clone()),
            Plan::Step { echo, .. } => {
                let x = st.as_ref().unwrap();
                let mut out = echo.clone();
                out.extend_from_slice(&x.tokens[x.prefix_len..]);
                Some(out)
            }
        }
    };
    let vocal_out = track_out(&v_plan, &v_step);
    let accomp_out = track_out(&a_plan, &a_step);

    // song decoding over aligned state pairs
    let song = if mc.song_head_enabled {
        let col_of = |plan: &Plan, pos: usize| -> Option<usize> {
            match plan {
                Plan::Fixed(_) => Some(pos),
                Plan::Step {
                    prefix, start_pos, ..
                } => {
                    if pos < *start_pos {
                        None
                    } else {
                        Some(prefix.len() - 1 + (pos - start_pos))
                    }
                }
                Plan::Off => None,
            }
        };
        let range_of = |plan: &Plan, out: &Option<Vec<u32>>| -> (usize, usize) {
            match plan {
                Plan::Fixed(toks) => (0, toks.len()),
                Plan::Step { start_pos, .. } => {
                    (*start_pos, out.as_ref().map_or(*start_pos, |o| o.len()))
                }
                Plan::Off => (0, 0),
            }
        };
        let (v_lo, v_hi) = range_of(&v_plan, &vocal_out);
        let (a_lo, a_hi) = range_of(&a_plan, &accomp_out);
        let lo = v_lo.max(a_lo);
        let hi = v_hi.min(a_hi);
        if hi > lo {
            let d = model.cfg.d_h;
            let n = hi - lo;
            let mut ev = Vec::with_capacity(n * d);
            let mut ea = Vec::with_capacity(n * d);
            for pos in lo..hi {
                let cv = col_of(&v_plan, pos).unwrap();
                let ca = col_of(&a_plan, pos).unwrap();
                ev.extend_from_slice(dec.state(true).e_row(cv, d));
                ea.extend_from_slice(dec.state(false).e_row(ca, d));
            }
            Some(song_decode_rows(model, store, &ev, &ea, n)?)
        } else {
            Some(Vec::new())
        }
    } else {
        None
    };

    // which streams the task outputs
    let (emit_v, emit_a) = match task {
        TaskId::LyricsToVocals | TaskId::VocalsEditing => (true, false),
        TaskId::MusicContinuation => (false, true),
        _ => (true, true),
    };
    Ok(Generated {
        vocal: if emit_v { vocal_out } else { None },
        accomp: if emit_a { accomp_out } else { None },
        song,
    })
}

fn plan_streams(model: &Dslm, task: TaskId, cond: &Conditions) -> CoreResult<(Plan, Plan)> {
    let vv = model.cfg.vocab_vocal;
    let va = model.cfg.vocab_accomp;
    match task {
        TaskId::LyricsToSong => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            forbid(task, &cond.predetermined_vocal, "pre-determined vocals")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            forbid(task, &cond.edit_suffix_vocal, "edit span")?;
            Ok((
                prompt_plan(model, cond.vocal_prompt.as_deref(), vv)?,
                prompt_plan(model, cond.accomp_prompt.as_deref(), va)?,
            ))
        }
        TaskId::LyricsToVocals => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            forbid(task, &cond.accomp_prompt, "accompaniment prompt")?;
            forbid(task, &cond.predetermined_vocal, "pre-determined vocals")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            forbid(task, &cond.edit_suffix_vocal, "edit span")?;
            Ok((
                prompt_plan(model, cond.vocal_prompt.as_deref(), vv)?,
                prompt_plan(model, None, va)?,
            ))
        }
        TaskId::AccompanimentToSong => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            let acc = require(task, cond.predetermined_accomp.clone(), "pre-determined accompaniment")?;
            forbid(task, &cond.accomp_prompt, "accompaniment prompt")?;
            forbid(task, &cond.predetermined_vocal, "pre-determined vocals")?;
            forbid(task, &cond.edit_suffix_vocal, "edit span")?;
            check_track_tokens("pre-determined accompaniment", &acc, va)?;
            Ok((
                prompt_plan(model, cond.vocal_prompt.as_deref(), vv)?,
                Plan::Fixed(acc),
            ))
        }
        TaskId::VocalsToSong => {
            let voc = require(task, cond.predetermined_vocal.clone(), "pre-determined vocals")?;
            forbid(task, &cond.vocal_prompt, "vocal prompt")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            forbid(task, &cond.edit_suffix_vocal, "edit span")?;
            check_track_tokens("pre-determined vocals", &voc, vv)?;
            Ok((
                Plan::Fixed(voc),
                prompt_plan(model, cond.accomp_prompt.as_deref(), va)?,
            ))
        }
        TaskId::MusicContinuation => {
            let p = require(task, cond.accomp_prompt.clone(), "accompaniment prompt")?;
            forbid(task, &cond.lyrics, "lyrics")?;
            forbid(task, &cond.vocal_prompt, "vocal prompt")?;
            forbid(task, &cond.predetermined_vocal, "pre-determined vocals")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            forbid(task, &cond.edit_suffix_vocal, "edit span")?;
            Ok((Plan::Off, prompt_plan(model, Some(&p), va)?))
        }
        TaskId::SongEditing => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            let sv = require(task, cond.edit_suffix_vocal.clone(), "vocal edit span")?;
            let sa = require(task, cond.edit_suffix_accomp.clone(), "accompaniment edit span")?;
            forbid(task, &cond.vocal_prompt, "vocal prompt")?;
            forbid(task, &cond.accomp_prompt, "accompaniment prompt")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            Ok((edit_plan(model, &sv, vv)?, edit_plan(model, &sa, va)?))
        }
        TaskId::VocalsEditing => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            let sv = require(task, cond.edit_suffix_vocal.clone(), "vocal edit span")?;
            forbid(task, &cond.edit_suffix_accomp, "accompaniment edit span")?;
            forbid(task, &cond.predetermined_accomp, "pre-determined accompaniment")?;
            forbid(task, &cond.vocal_prompt, "vocal prompt")?;
            Ok((edit_plan(model, &sv, vv)?, Plan::Off))
        }
        TaskId::VocalsEditingInSong => {
            require(task, cond.lyrics.as_ref(), "lyrics")?;
            let sv = require(task, cond.edit_suffix_vocal.clone(), "vocal edit span")?;
            let acc = require(task, cond.predetermined_accomp.clone(), "pre-determined accompaniment")?;
            forbid(task, &cond.edit_suffix_accomp, "accompaniment edit span")?;
            forbid(task, &cond.vocal_prompt, "vocal prompt")?;
            check_track_tokens("pre-determined accompaniment", &acc, va)?;
            Ok((edit_plan(model, &sv, vv)?, Plan::Fixed(acc)))
        }
    }
}

// ---- incremental vs full re-forward ------------------------------------------

/// Compare step-cached generation logits against a full re-forward (on the
/// autodiff-graph path) at every step; returns the max absolute deviation.
pub fn incremental_consistency_check<S: Scalar>(
    model: &Dslm,
    store: &ParamStore<S>,
    task: TaskId,
    clip: &Clip,
) -> CoreResult<f64> {
    let mc = route_task(task);
    let lyric_ids = clip.lyric_token_ids(false);
    let mut dec = DualDecoder::new(model, store, mc, &lyric_ids)?;

    let full_input = |track: &[u32]| -> Vec<u32> {
        let mut v = vec![BOS];
        v.extend_from_slice(track);
        v
    };

    // which stream steps, which is fixed
    let (v_steps, a_steps) = match task {
        TaskId::LyricsToSong | TaskId::LyricsToVocals | TaskId::SongEditing => (true, true),
        TaskId::AccompanimentToSong | TaskId::VocalsEditingInSong => (true, false),
        TaskId::VocalsToSong => (false, true),
        TaskId::MusicContinuation => (false, true),
        TaskId::VocalsEditing => (true, false),
    };
    let v_fixed = mc.vocal_enabled && !v_steps;
    let a_fixed = mc.accomp_enabled && !a_steps;
    let v_in = full_input(&clip.vocal);
    let a_in = full_input(&clip.accomp);
    if v_fixed {
        dec.precompute_fixed(true, &v_in)?;
    }
    if a_fixed {
        dec.precompute_fixed(false, &a_in)?;
    }

    let n_steps = if v_steps { v_in.len() } else { a_in.len() };
    let mut max_dev = 0.0f64;
    for t in 0..n_steps {
        let (lv, la) = dec.step(
            (v_steps && mc.vocal_enabled).then(|| v_in[t]),
            (a_steps && mc.accomp_enabled).then(|| a_in[t]),
        )?;

        // full re-forward over the prefix, padded to a common length
        let t_full = if v_fixed || a_fixed {
            v_in.len().max(a_in.len())
        } else {
            t + 1
        };
        let pad_to = |input: &[u32], steps: bool| -> (Vec<u32>, usize) {
            if steps {
                let mut v = input[..t + 1].to_vec();
                let real = v.len();
                v.resize(t_full, vocab::PAD);
                (v, real)
            } else {
                (input.to_vec(), input.len())
            }
        };
        let mut g = Graph::<S>::new();
        let mut leaves = ParamLeaves::new(store, false);
        let (vi, vr) = pad_to(&v_in, v_steps);
        let (ai, ar) = pad_to(&a_in, a_steps);
        let spec = ForwardSpec {
            lyric_ids: &lyric_ids,
            vocal: mc.vocal_enabled.then_some(StreamInputs {
                input: &vi,
                real_len: vr,
            }),
            accomp: mc.accomp_enabled.then_some(StreamInputs {
                input: &ai,
                real_len: ar,
            }),
            mask_config: mc,
            song_head: false,
        };
        let out = forward_spec(&mut g, &mut leaves, model, &spec)?;
        let mut cmp = |logits_inc: Option<Vec<S>>, logits_full: Option<crate::graph::TensorId>, vsize: usize| {
            if let (Some(inc), Some(full)) = (logits_inc, logits_full) {
                let row = &g.data(full)[t * vsize..(t + 1) * vsize];
                for (a, b) in inc.iter().zip(row) {
                    let dev = (a.to_f64() - b.to_f64()).abs();
                    if dev > max_dev {
                        max_dev = dev;
                    }
                }
            }
        };
        cmp(lv, out.logits_v, model.cfg.vocab_vocal);
        cmp(la, out.logits_a, model.cfg.vocab_accomp);
    }
    Ok(max_dev)
}
